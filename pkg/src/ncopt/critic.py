"""Baseline network: LSTM encoder, a glimpse-only process block, and a
two-layer ReLU head producing one scalar per instance."""

from __future__ import annotations

import numpy as np

from . import grad as G
from .grad import ParamStore, Tensor
from .policy import attention_shapes, glimpse, lstm_shapes, run_encoder, set_forget_bias


class Critic:
    def __init__(self, d: int = 128, input_dim: int = 2, process_steps: int = 3, seed=0, init_range: float = 0.08):
        if process_steps < 0:
            raise ValueError("process_steps must be >= 0")
        self.d = d
        self.input_dim = input_dim
        self.process_steps = process_steps
        shapes = {"embed": (input_dim, d)}
        shapes.update(lstm_shapes("enc", d, d))
        shapes.update(attention_shapes("process", d))
        shapes.update({"fc1.W": (d, d), "fc1.b": (d,), "fc2.W": (d, 1), "fc2.b": (1,)})
        self.params = ParamStore(shapes)
        G.init_uniform(self.params, -init_range, init_range, seed)
        set_forget_bias(self.params, "enc", d)

    @property
    def arch(self) -> dict:
        return {"model": "critic", "d": self.d, "input_dim": self.input_dim, "process_steps": self.process_steps}

    def forward(self, features) -> Tensor:
        """Predicted objective for each instance in ``features`` (B, n, input_dim)."""
        feats = np.asarray(features, dtype=np.float64)
        if feats.ndim != 3 or feats.shape[1] == 0:
            raise ValueError(f"critic needs a nonempty (B, n, {self.input_dim}) batch, got {feats.shape}")
        p = self.params
        enc, (h, _) = run_encoder(p, "enc", G.Tensor(feats) @ p["embed"], self.d)
        ref_proj = enc @ p["process.W_ref"] if self.process_steps else None
        for _ in range(self.process_steps):
            h = glimpse(p, "process", enc, h, ref_proj=ref_proj)
        hidden = G.relu(h @ p["fc1.W"] + p["fc1.b"])
        out = hidden @ p["fc2.W"] + p["fc2.b"]
        return G.reshape(out, (feats.shape[0],))


def critic_loss(predictions: Tensor, observed) -> Tensor:
    """Mean squared error between predictions and observed objective values."""
    obs = np.asarray(observed, dtype=np.float64)
    if predictions.shape != obs.shape:
        raise G.ShapeError("critic_loss", predictions.shape, obs.shape)
    if obs.size == 0:
        raise ValueError("critic_loss: empty batch")
    return G.mean(G.square(predictions - obs))
