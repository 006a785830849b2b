import threading
import time

import numpy as np
import pytest

from bdmae.attacksim import TriggerSpec, apply_trigger, generate_corpus
from bdmae.core import RESTORER_SIZE, make_rng, sample_uniform_token_mask, token_mask_to_pixel_mask
from bdmae.oracles import (
    EchoRestorer,
    ExternalOracle,
    OracleEndpoint,
    OracleTimeout,
    ProtocolError,
    SyntheticWorld,
    decode_pixels,
    encode_pixels,
    laplace_inpaint_restorer,
    synthetic_backdoored_classifier,
    synthetic_clean_classifier,
)
from bdmae.scoregen import restore_composite

from conftest import NoiseRestorer

WORLD = SyntheticWorld(num_classes=5)
SPEC = TriggerSpec(pattern="solid-patch", size=9, color=(1.0, 1.0, 1.0), placement=(20, 20), target=0)


def test_clean_classifier_recovers_palette_fill():
    f = synthetic_clean_classifier(WORLD)
    for c in range(WORLD.num_classes):
        img = np.tile(WORLD.palette[c], (64, 64, 1))
        assert f.classify(img) == c


def test_clean_classifier_ignores_triggers():
    f = synthetic_clean_classifier(WORLD)
    img = np.tile(WORLD.palette[3], (64, 64, 1))
    for spec in (
        SPEC,
        TriggerSpec(pattern="checkerboard", size=9, placement=(5, 40), target=0),
    ):
        triggered, _ = apply_trigger(img, spec, make_rng(0))
        assert f.classify(triggered) == 3


def test_clean_classifier_stable_under_tiny_noise():
    f = synthetic_clean_classifier(WORLD)
    ds = generate_corpus(WORLD, SPEC, 2, 64, make_rng(5))
    for img, label in ds.clean:
        noisy = np.clip(img + 1e-9, 0.0, 1.0)
        assert f.classify(noisy) == f.classify(img) == label


def test_backdoored_delegates_on_clean_images():
    f = synthetic_backdoored_classifier(WORLD, SPEC, target=0)
    clean = synthetic_clean_classifier(WORLD)
    ds = generate_corpus(WORLD, SPEC, 4, 64, make_rng(6))
    for img, label in ds.clean:
        assert f.classify(img) == clean.classify(img) == label


def test_backdoored_fires_on_full_trigger():
    f = synthetic_backdoored_classifier(WORLD, SPEC, target=0)
    ds = generate_corpus(WORLD, SPEC, 20, 64, make_rng(7))
    assert len(ds.triggered) == 100
    for img, _, target in ds.triggered:
        assert f.classify(img) == target


def test_backdoored_tolerates_partial_trigger():
    f = synthetic_backdoored_classifier(WORLD, SPEC, target=0)
    img = np.tile(WORLD.palette[2], (64, 64, 1))
    triggered, mask = apply_trigger(img, SPEC, make_rng(0))
    # erase one corner: 4 of 81 pixels (~5%) -> still >= 90% intact
    partial = triggered.copy()
    partial[20:22, 20:22] = WORLD.palette[2]
    assert f.classify(partial) == 0
    # erase a 3x9 band (~33%) -> below the match threshold, rule takes over
    broken = triggered.copy()
    broken[20:23, 20:29] = WORLD.palette[2]
    assert f.classify(broken) == 2


def test_classifier_determinism():
    f = synthetic_backdoored_classifier(WORLD, SPEC, target=0)
    img = generate_corpus(WORLD, SPEC, 1, 64, make_rng(8)).triggered[0][0]
    assert f.classify(img) == f.classify(img)


# ---------------------------------------------------------------------------
# Laplace restorer


def _upsized(img64):
    from bdmae.scoregen import upsample_for_restorer

    return upsample_for_restorer(img64)


def test_laplace_constant_image_is_fixed_point():
    g = laplace_inpaint_restorer()
    img = np.full((RESTORER_SIZE, RESTORER_SIZE, 3), 0.42)
    mask = sample_uniform_token_mask(make_rng(0), 147)
    out = g.restore(img, mask)
    assert np.allclose(out, 0.42, atol=1e-12)


def test_laplace_restores_linear_gradient():
    g = laplace_inpaint_restorer()
    ramp = np.linspace(0.1, 0.9, RESTORER_SIZE)
    img = np.tile(ramp[None, :, None], (RESTORER_SIZE, 1, 3))
    mask = np.zeros((14, 14), dtype=np.uint8)
    mask[4:9, 4:9] = 1  # interior block, borders stay anchored
    out = g.restore(img, mask)
    assert np.abs(out - img).max() <= 2e-3


def test_laplace_erases_fully_masked_high_contrast_patch():
    g = laplace_inpaint_restorer()
    img = np.full((RESTORER_SIZE, RESTORER_SIZE, 3), 0.35)
    img[64:96, 64:96] = 1.0  # trigger-like patch, 0.65 away from surroundings
    mask = np.zeros((14, 14), dtype=np.uint8)
    mask[3:7, 3:7] = 1  # covers pixels 48..112: patch fully inside
    out = g.restore(img, mask)
    zone = token_mask_to_pixel_mask(mask, RESTORER_SIZE, RESTORER_SIZE).astype(bool)
    assert np.abs(out[zone] - 1.0).min() > 0.1


def test_laplace_all_masked_degenerates_to_gray():
    g = laplace_inpaint_restorer()
    img = make_rng(0).random((RESTORER_SIZE, RESTORER_SIZE, 3))
    out = g.restore(img, np.ones((14, 14), dtype=np.uint8))
    assert np.allclose(out, 0.5)


def test_laplace_keeps_unmasked_pixels():
    g = laplace_inpaint_restorer()
    img = make_rng(1).random((RESTORER_SIZE, RESTORER_SIZE, 3))
    mask = sample_uniform_token_mask(make_rng(2), 100)
    out = g.restore(img, mask)
    keep = ~token_mask_to_pixel_mask(mask, RESTORER_SIZE, RESTORER_SIZE).astype(bool)
    assert np.array_equal(out[keep], img[keep])


def test_compositing_safety_for_arbitrary_restorer():
    rng = make_rng(3)
    x = rng.random((48, 48, 3))
    mask = sample_uniform_token_mask(rng, 147)
    composite, pixel_mask = restore_composite(x, mask, NoiseRestorer())
    outside = ~pixel_mask.astype(bool)
    assert np.array_equal(composite[outside], x[outside])


# ---------------------------------------------------------------------------
# wire protocol


def test_pixel_codec_roundtrip_is_involutive():
    rng = make_rng(4)
    raw = rng.integers(0, 256, (16, 16, 3)).astype(np.uint8)
    img = raw.astype(np.float64) / 255.0
    assert np.array_equal(decode_pixels(encode_pixels(img), 16, 16), img)


def test_external_oracle_echo_and_constant_label(toy_server):
    host, port = toy_server.server_address
    with ExternalOracle(OracleEndpoint.from_spec(f"tcp:{host}:{port}")) as oracle:
        assert set(oracle.ops) == {"classify", "restore"}
        f = oracle.classifier()
        g = oracle.restorer()
        rng = make_rng(5)
        img = np.rint(rng.random((RESTORER_SIZE, RESTORER_SIZE, 3)) * 255) / 255
        mask = sample_uniform_token_mask(rng, 147)
        assert np.array_equal(g.restore(img, mask), img)
        assert f.classify(img) == toy_server.label


def test_external_oracle_concurrent_requests_matched_by_id(toy_server):
    host, port = toy_server.server_address
    rng = make_rng(6)
    images = [np.rint(rng.random((RESTORER_SIZE, RESTORER_SIZE, 3)) * 255) / 255 for _ in range(64)]
    mask = sample_uniform_token_mask(rng, 147)
    results: list = [None] * len(images)
    with ExternalOracle(OracleEndpoint.from_spec(f"tcp:{host}:{port}")) as oracle:
        g = oracle.restorer()

        def work(i):
            results[i] = g.restore(images[i], mask)

        threads = [threading.Thread(target=work, args=(i,)) for i in range(len(images))]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
    for img, out in zip(images, results):
        assert np.array_equal(out, img)


def test_external_oracle_timeout():
    from conftest import ToyOracleServer

    server = ToyOracleServer(delay=1.0)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        host, port = server.server_address
        with ExternalOracle(OracleEndpoint.from_spec(f"tcp:{host}:{port}", timeout_ms=150)) as oracle:
            with pytest.raises(OracleTimeout):
                oracle.classifier().classify(np.zeros((16, 16, 3)))
    finally:
        server.shutdown()
        server.server_close()


def test_external_oracle_rejects_out_of_range_label(toy_server):
    toy_server.label = 99
    host, port = toy_server.server_address
    with ExternalOracle(OracleEndpoint.from_spec(f"tcp:{host}:{port}")) as oracle:
        with pytest.raises(ProtocolError):
            oracle.classifier().classify(np.zeros((16, 16, 3)))


def test_external_oracle_surfaces_server_errors(toy_server):
    host, port = toy_server.server_address
    with ExternalOracle(OracleEndpoint.from_spec(f"tcp:{host}:{port}")) as oracle:
        with pytest.raises(ProtocolError):
            oracle._request({"op": "nonsense"})


def test_exec_transport(tmp_path):
    script = tmp_path / "echo_server.py"
    script.write_text(
        "import json, sys\n"
        "sys.stdout.write(json.dumps({'proto': 'bdmae-oracle/1', 'ops': ['classify'],"
        " 'num_classes': 3, 'max_in_flight': 1}) + '\\n')\n"
        "sys.stdout.flush()\n"
        "for line in sys.stdin:\n"
        "    msg = json.loads(line)\n"
        "    sys.stdout.write(json.dumps({'id': msg['id'], 'label': 1}) + '\\n')\n"
        "    sys.stdout.flush()\n"
    )
    with ExternalOracle(OracleEndpoint.from_spec(f"exec:python3 {script}")) as oracle:
        f = oracle.classifier()
        assert f.num_classes == 3
        assert f.classify(np.zeros((16, 16, 3))) == 1
