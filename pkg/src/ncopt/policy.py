"""Pointer network: shared linear embedding, LSTM encoder/decoder, glimpse and
pointing attention with masking, temperature and logit clipping.

All computations are batched: ``features`` has shape (B, n, input_dim), the
encoder memory has shape (B, n, d), and a decode step yields (B, n) logits.
Matrices follow the row-vector convention, ``x @ W``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import grad as G
from .grad import MASK_SENTINEL, ParamStore, Tensor
from .problems import Instance, Solution, make_env, make_solution

GATES = 4  # input, forget, cell, output


def lstm_shapes(prefix: str, d_in: int, d: int) -> dict[str, tuple[int, ...]]:
    return {
        f"{prefix}.W_x": (d_in, GATES * d),
        f"{prefix}.W_h": (d, GATES * d),
        f"{prefix}.b": (GATES * d,),
    }


def attention_shapes(prefix: str, d: int) -> dict[str, tuple[int, ...]]:
    return {f"{prefix}.W_ref": (d, d), f"{prefix}.W_q": (d, d), f"{prefix}.v": (d,)}


def set_forget_bias(params: ParamStore, prefix: str, d: int, value: float = 1.0) -> None:
    b = params[f"{prefix}.b"].data.copy()
    b[d : 2 * d] = value
    params[f"{prefix}.b"].data = b


def lstm_step(x_proj: Tensor, h: Tensor, c: Tensor, W_h: Tensor, b: Tensor, d: int):
    """One LSTM step given the already-projected input ``x @ W_x``."""
    z = x_proj + h @ W_h + b
    i = G.sigmoid(z[:, 0:d])
    f = G.sigmoid(z[:, d : 2 * d])
    g = G.tanh(z[:, 2 * d : 3 * d])
    o = G.sigmoid(z[:, 3 * d :])
    c = f * c + i * g
    h = o * G.tanh(c)
    return h, c


def run_encoder(params: ParamStore, prefix: str, emb: Tensor, d: int):
    """Consume ``emb`` (B, n, d) from a zero state; return (enc (B, n, d), (h, c))."""
    if emb.ndim != 3 or emb.shape[1] == 0:
        raise ValueError(f"encoder needs a nonempty (B, n, d) sequence, got {emb.shape}")
    B, n, _ = emb.shape
    xw = emb @ params[f"{prefix}.W_x"]
    h = Tensor(np.zeros((B, d)))
    c = Tensor(np.zeros((B, d)))
    hs = []
    for t in range(n):
        h, c = lstm_step(xw[:, t, :], h, c, params[f"{prefix}.W_h"], params[f"{prefix}.b"], d)
        hs.append(h)
    return G.stack(hs, axis=1), (h, c)


def _check_mask(mask, k: int) -> None:
    if mask is None:
        return
    if mask.shape[-1] != k:
        raise G.ShapeError("attention mask", mask.shape, (k,))
    if np.any(np.all(mask, axis=-1)):
        raise ValueError("attention: every position is masked")


def attention_logits(
    params: ParamStore,
    prefix: str,
    ref: Tensor,
    q: Tensor,
    mask=None,
    clip: float | None = None,
    temperature: float = 1.0,
    ref_proj: Tensor | None = None,
) -> Tensor:
    """``u_i = v . tanh(r_i W_ref + q W_q)``, optionally ``C tanh(u)``, divided by
    the temperature, with masked positions set to the sentinel afterwards."""
    B, k, d = ref.shape
    _check_mask(mask, k)
    if ref_proj is None:
        ref_proj = ref @ params[f"{prefix}.W_ref"]
    qp = G.reshape(q @ params[f"{prefix}.W_q"], (B, 1, d))
    s = G.tanh(ref_proj + qp)
    u = G.reshape(s @ G.reshape(params[f"{prefix}.v"], (d, 1)), (B, k))
    if clip is not None:
        u = G.tanh(u) * float(clip)
    if temperature != 1.0:
        u = u * (1.0 / temperature)
    if mask is not None:
        keep = (~mask).astype(np.float64)
        u = u * keep + np.where(mask, MASK_SENTINEL, 0.0)
    return u


def glimpse(
    params: ParamStore,
    prefix: str,
    ref: Tensor,
    q: Tensor,
    mask=None,
    ref_proj: Tensor | None = None,
) -> Tensor:
    """Attention-weighted sum of the reference vectors (masked, no clip, no temperature)."""
    B, k, d = ref.shape
    p = G.softmax(attention_logits(params, prefix, ref, q, mask, ref_proj=ref_proj), axis=-1)
    return G.reshape(G.reshape(p, (B, 1, k)) @ ref, (B, d))


@dataclass
class Rollout:
    """Batched decode result. ``actions`` is padded with -1 past each row's length."""

    actions: np.ndarray  # (B, S) int
    lengths: np.ndarray  # (B,)
    step_logp: Tensor  # (B, S)
    logp: Tensor  # (B,)
    cost: np.ndarray  # (B,)

    def sequence(self, b: int) -> np.ndarray:
        return self.actions[b, : self.lengths[b]]


@dataclass
class DecodeContext:
    enc: Tensor
    h: Tensor
    c: Tensor
    mask: np.ndarray
    step: int = 0
    ref_glimpse: Tensor | None = None
    ref_point: Tensor | None = None


class PointerNetwork:
    """Pointer-network policy over input sequences of ``input_dim``-vectors."""

    def __init__(self, d: int = 128, input_dim: int = 2, n_glimpses: int = 1, seed=0, init_range: float = 0.08):
        self.d = d
        self.input_dim = input_dim
        self.n_glimpses = n_glimpses
        shapes = {"embed": (input_dim, d)}
        shapes.update(lstm_shapes("enc", d, d))
        shapes.update(lstm_shapes("dec", d, d))
        shapes["start"] = (d,)
        shapes.update(attention_shapes("glimpse", d))
        shapes.update(attention_shapes("ptr", d))
        self.params = ParamStore(shapes)
        G.init_uniform(self.params, -init_range, init_range, seed)
        set_forget_bias(self.params, "enc", d)
        set_forget_bias(self.params, "dec", d)

    @property
    def arch(self) -> dict:
        return {"model": "pointer", "d": self.d, "input_dim": self.input_dim, "n_glimpses": self.n_glimpses}

    def copy(self) -> PointerNetwork:
        other = PointerNetwork.__new__(PointerNetwork)
        other.d, other.input_dim, other.n_glimpses = self.d, self.input_dim, self.n_glimpses
        other.params = self.params.copy()
        return other

    # --- building blocks ---------------------------------------------------

    def embed(self, features) -> Tensor:
        x = G.as_tensor(features)
        if x.shape[-1] != self.input_dim:
            raise G.ShapeError("embed", x.shape, self.params["embed"].shape)
        return x @ self.params["embed"]

    def encode(self, emb: Tensor):
        return run_encoder(self.params, "enc", emb, self.d)

    def start_context(self, features) -> tuple[DecodeContext, Tensor, Tensor]:
        """Embed and encode; return the initial context, embeddings and first decoder input."""
        feats = np.asarray(features, dtype=np.float64)
        emb = self.embed(feats)
        enc, (h, c) = self.encode(emb)
        B, n, _ = feats.shape
        ctx = DecodeContext(
            enc=enc,
            h=h,
            c=c,
            mask=np.zeros((B, n), dtype=bool),
            ref_glimpse=enc @ self.params["glimpse.W_ref"] if self.n_glimpses else None,
            ref_point=enc @ self.params["ptr.W_ref"],
        )
        first = Tensor(np.zeros((B, self.d))) + self.params["start"]
        return ctx, emb, first

    def decode_step(self, ctx: DecodeContext, inp: Tensor, temperature: float = 1.0, clip: float | None = None) -> Tensor:
        """Advance the decoder with input ``inp``; return log-probabilities (B, n)."""
        if not temperature > 0:
            raise ValueError(f"temperature must be positive, got {temperature}")
        p = self.params
        ctx.h, ctx.c = lstm_step(inp @ p["dec.W_x"], ctx.h, ctx.c, p["dec.W_h"], p["dec.b"], self.d)
        q = ctx.h
        for _ in range(self.n_glimpses):
            q = glimpse(p, "glimpse", ctx.enc, q, ctx.mask, ref_proj=ctx.ref_glimpse)
        u = attention_logits(p, "ptr", ctx.enc, q, ctx.mask, clip=clip, temperature=temperature, ref_proj=ctx.ref_point)
        return G.log_softmax(u, axis=-1)

    # --- rollouts ----------------------------------------------------------

    def rollout_batch(
        self,
        kind: str,
        features,
        mode: str = "sample",
        temperature: float = 1.0,
        clip: float | None = 10.0,
        rng: np.random.Generator | None = None,
        capacity=None,
        actions=None,
    ) -> Rollout:
        """Decode a batch of instances.

        ``mode`` is ``"greedy"`` (argmax, lowest index on ties), ``"sample"``,
        or ``"forced"`` with ``actions`` giving the sequences to score.
        """
        feats = np.asarray(features, dtype=np.float64)
        if feats.ndim != 3 or feats.shape[1] == 0:
            raise ValueError(f"features must have shape (B, n, {self.input_dim}) with n >= 1")
        if mode == "sample" and rng is None:
            raise ValueError("sampling needs an rng")
        if mode == "forced":
            actions = np.asarray(actions)
        B, n, _ = feats.shape
        rows = np.arange(B)
        env = make_env(kind, feats, capacity)
        ctx, emb, inp = self.start_context(feats)
        step_lp, chosen = [], []
        lengths = np.zeros(B, dtype=np.int64)
        active = ~env.done()
        for t in range(env.max_steps):
            if not active.any():
                break
            ctx.mask = env.mask.copy()
            ctx.mask[~active, 0] = False  # finished rows decode a dummy step with zero weight
            ctx.step = t
            logp = self.decode_step(ctx, inp, temperature, clip)
            if mode == "greedy":
                idx = np.argmax(logp.data, axis=1)
            elif mode == "sample":
                idx = sample_categorical(np.exp(logp.data), ctx.mask, rng)
            elif mode == "forced":
                idx = actions[:, t].copy() if t < actions.shape[1] else np.full(B, -1)
                ok = (idx >= 0) & (idx < n)
                ok[ok] = ~ctx.mask[rows[ok], idx[ok]]
                if np.any(active & ~ok):
                    raise ValueError(f"forced action at step {t} is not allowed for rows {np.nonzero(active & ~ok)[0].tolist()}")
            else:
                raise ValueError(f"unknown decode mode {mode!r}")
            idx = np.where(active, idx, 0)
            lp = logp[rows, idx]
            if not active.all():
                lp = lp * active.astype(np.float64)
            step_lp.append(lp)
            chosen.append(np.where(active, idx, -1))
            env.step(idx, active)
            lengths += active
            inp = emb[rows, idx]
            active = ~env.done()
        if mode == "forced":
            beyond = np.arange(actions.shape[1])[None, :] >= lengths[:, None]
            if np.any(beyond & (actions >= 0)):
                raise ValueError("forced sequence continues past the end of decoding")
        if not step_lp:
            zeros = np.zeros((B, 0))
            return Rollout(zeros.astype(np.int64), lengths, Tensor(zeros), Tensor(np.zeros(B)), env.cost(zeros.astype(np.int64), lengths))
        step_logp = G.stack(step_lp, axis=1)
        acts = np.stack(chosen, axis=1)
        return Rollout(acts, lengths, step_logp, G.sum(step_logp, axis=1), env.cost(acts, lengths))

    def rollout(self, instance: Instance, mode: str = "greedy", temperature: float = 1.0, clip: float | None = 10.0, rng=None) -> tuple[Rollout, Solution]:
        cap = getattr(instance, "capacity", None)
        r = self.rollout_batch(instance.kind, instance.features[None], mode, temperature, clip, rng, capacity=cap)
        return r, make_solution(instance, r.sequence(0))


def sample_categorical(probs: np.ndarray, mask: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF draw per row; zero-probability positions are never returned."""
    cdf = np.cumsum(probs, axis=1)
    u = rng.random(len(probs)) * cdf[:, -1]
    idx = (cdf <= u[:, None]).sum(axis=1)
    last = probs.shape[1] - 1 - np.argmax((~mask)[:, ::-1], axis=1)
    return np.minimum(idx, last)
