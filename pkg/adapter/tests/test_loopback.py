"""Engine <-> adapter conformance: the defense engine's wire client talks to
the adapter subprocess over stdio, with echo backends standing in for the
real models."""

import sys
import threading

import numpy as np
import pytest

bdmae = pytest.importorskip("bdmae", reason="loopback test needs the engine package")

from bdmae.core import make_rng, sample_uniform_token_mask
from bdmae.oracles import ExternalOracle, OracleEndpoint


@pytest.fixture
def adapter_client():
    spec = (
        f"exec:{sys.executable} -m oracle_adapter.cli --stdio "
        "--classifier echo --restorer echo --max-in-flight 8"
    )
    with ExternalOracle(OracleEndpoint.from_spec(spec, timeout_ms=60000)) as client:
        yield client


def test_handshake_contract(adapter_client):
    assert set(adapter_client.ops) == {"classify", "restore"}
    assert adapter_client.num_classes == 10
    assert adapter_client.max_in_flight == 8


def test_thousand_mixed_requests_zero_protocol_errors(adapter_client):
    f = adapter_client.classifier()
    g = adapter_client.restorer()
    rng = make_rng(1)
    # quantized images so the echo round trip is byte-identical
    imgs224 = [np.rint(rng.random((224, 224, 3)) * 255) / 255 for _ in range(8)]
    imgs_small = [np.rint(rng.random((32, 32, 3)) * 255) / 255 for _ in range(8)]
    masks = [sample_uniform_token_mask(rng, int(rng.integers(0, 197))) for _ in range(8)]

    errors: list[Exception] = []
    lock = threading.Lock()

    def run_slice(start: int) -> None:
        local = make_rng(start)
        try:
            for i in range(start, 1000, 8):
                if i % 2 == 0:
                    img = imgs224[int(local.integers(0, 8))]
                    out = g.restore(img, masks[int(local.integers(0, 8))])
                    assert np.array_equal(out, img)
                else:
                    label = f.classify(imgs_small[int(local.integers(0, 8))])
                    assert 0 <= label < adapter_client.num_classes
        except Exception as exc:  # pragma: no cover - failure path
            with lock:
                errors.append(exc)

    threads = [threading.Thread(target=run_slice, args=(s,)) for s in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not errors, errors[:3]


def test_engine_defend_through_adapter(adapter_client):
    # full pipeline against the adapter's oracles (echo restorer: the engine
    # still runs end to end and stays deterministic)
    from bdmae.restore import DefenseConfig, defend
    from bdmae.scoregen import ScoreGenConfig

    rng = make_rng(5)
    x = np.rint(rng.random((64, 64, 3)) * 255) / 255
    cfg = DefenseConfig(scoregen=ScoreGenConfig(n_outer=2, n_inner=2))
    rep = defend(x, adapter_client.classifier(), adapter_client.restorer(), cfg, make_rng(0))
    rep2 = defend(x, adapter_client.classifier(), adapter_client.restorer(), cfg, make_rng(0))
    assert rep.purified_label == rep2.purified_label
    assert np.array_equal(rep.purified, rep2.purified)
