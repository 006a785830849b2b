"""Model backends: echo stand-ins for plumbing tests, real networks for runs.

The echo backend needs no dependencies: restore is the identity and
classify hashes pixel bytes to a label. The torch-backed classifier and
the masked-image-modeling restorer import their stacks lazily, so the
server only pays for what its config enables. Classify always answers
with the argmax label alone; nothing resembling a confidence ever leaves
a backend.
"""

from __future__ import annotations

import numpy as np

from .protocol import RESTORE_SIZE, TOKEN_GRID


class BackendError(RuntimeError):
    """Model loading failed; the server must exit before the handshake."""


class EchoBackend:
    """Deterministic dependency-free stand-in for both oracle roles."""

    def __init__(self, num_classes: int = 10):
        self.num_classes = num_classes

    def classify(self, image: np.ndarray) -> int:
        quant = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint64)
        return int(quant.sum() % self.num_classes)

    def restore(self, image: np.ndarray, mask: np.ndarray) -> np.ndarray:
        return image


class TorchClassifier:
    """Hard-label classifier from a TorchScript or pickled module checkpoint.

    Inputs reach the model as 1x3xHxW float tensors in [0, 1]; any
    normalization is expected to live inside the exported model. The class
    count is probed with one dummy forward pass at load time.
    """

    def __init__(self, checkpoint: str, device: str = "cpu"):
        try:
            import torch
        except ImportError as exc:
            raise BackendError(f"torch is required for a classifier checkpoint: {exc}") from exc
        self._torch = torch
        try:
            try:
                model = torch.jit.load(checkpoint, map_location=device)
            except Exception:
                model = torch.load(checkpoint, map_location=device, weights_only=False)
            model.eval()
            self._model = model.to(device)
            self._device = device
            with torch.no_grad():
                probe = torch.zeros(1, 3, RESTORE_SIZE, RESTORE_SIZE, device=device)
                out = self._model(probe)
            self.num_classes = int(out.shape[-1])
        except BackendError:
            raise
        except Exception as exc:
            raise BackendError(f"cannot load classifier checkpoint {checkpoint!r}: {exc}") from exc

    def classify(self, image: np.ndarray) -> int:
        torch = self._torch
        with torch.no_grad():
            x = torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1))[None]).float()
            logits = self._model(x.to(self._device))
        return int(logits.argmax(dim=-1).item())


# ImageNet statistics used by the public masked-autoencoder checkpoints
_MAE_MEAN = np.array([0.485, 0.456, 0.406])
_MAE_STD = np.array([0.229, 0.224, 0.225])

_MAE_CHECKPOINTS = {
    "base": "facebook/vit-mae-base",
    "large": "facebook/vit-mae-large",
}


class MaeRestorer:
    """Masked-image-modeling restorer driving a pretrained ViT autoencoder.

    The caller's 14x14 token mask is injected through the model's noise
    argument (its argsort decides which tokens stay visible), so exactly the
    requested tokens are reconstructed. Output is the full decoded image in
    [0, 1]; the engine's compositing keeps only the masked regions anyway.
    """

    def __init__(self, variant: str = "base", device: str = "cpu"):
        if variant not in _MAE_CHECKPOINTS:
            raise BackendError(f"unknown restorer variant {variant!r}; want base or large")
        try:
            import torch
            from transformers import ViTMAEForPreTraining
        except ImportError as exc:
            raise BackendError(f"torch+transformers are required for the restorer: {exc}") from exc
        self._torch = torch
        try:
            self._model = ViTMAEForPreTraining.from_pretrained(_MAE_CHECKPOINTS[variant])
            self._model.eval().to(device)
            self._device = device
        except Exception as exc:
            raise BackendError(f"cannot load restorer {variant!r}: {exc}") from exc

    def restore(self, image: np.ndarray, mask: np.ndarray) -> np.ndarray:
        torch = self._torch
        model = self._model
        masked = int(mask.sum())
        if masked == 0:
            return image
        norm = (image - _MAE_MEAN) / _MAE_STD
        x = torch.from_numpy(np.ascontiguousarray(norm.transpose(2, 0, 1))[None]).float()
        # low noise keeps a token visible; add index epsilons for a stable argsort
        flat = mask.reshape(-1).astype(np.float64)
        noise = torch.from_numpy(flat + np.arange(flat.size) * 1e-6).float()[None]
        with torch.no_grad():
            # half-token slack so int(seq * (1 - ratio)) never truncates a keeper
            model.config.mask_ratio = (masked - 0.5) / float(TOKEN_GRID * TOKEN_GRID)
            out = model(pixel_values=x.to(self._device), noise=noise.to(self._device))
            pred = out.logits  # (1, tokens, patch^2 * 3)
            if model.config.norm_pix_loss:
                patches = model.patchify(x.to(self._device))
                mean = patches.mean(dim=-1, keepdim=True)
                var = patches.var(dim=-1, keepdim=True)
                pred = pred * (var + 1e-6).sqrt() + mean
            decoded = model.unpatchify(pred)[0].cpu().numpy().transpose(1, 2, 0)
        return np.clip(decoded * _MAE_STD + _MAE_MEAN, 0.0, 1.0)


def build_classifier(selector: str | None, device: str):
    if selector is None:
        return None
    if selector == "echo":
        return EchoBackend()
    return TorchClassifier(selector, device=device)


def build_restorer(selector: str | None, device: str):
    if selector is None:
        return None
    if selector == "echo":
        return EchoBackend()
    return MaeRestorer(selector, device=device)
