"""Bidirectional convolutional LSTM over a sequence of slice probability maps.

One CLSTM with a single hidden channel runs in ascending slice order and a
second one in descending order. Their hidden maps are rescaled from
(-1, 1) to (0, 1) and mixed per slice with softmax weights, so the output
stays a probability map.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import NumericError, ShapeError, Tensor, concat_channels, conv2d, sigmoid, softmax, stack, tanh

GATES = ("i", "f", "c", "o")
FORGET_BIAS = 1.0
INIT_STD = 0.01


@dataclass
class CLSTMParams:
    """Gate kernels, peephole scalars and biases of one CLSTM layer.

    ``kernels[g, 0]`` is W_y<g> (applied to the input map) and
    ``kernels[g, 1]`` is W_h<g> (applied to the previous hidden map), for
    gates ``g`` in (i, f, c, o). ``peephole`` holds w_ci, w_cf, w_co and
    ``bias`` holds b_i, b_f, b_c, b_o.
    """

    kernels: Tensor
    peephole: Tensor
    bias: Tensor

    @classmethod
    def create(cls, rng: np.random.Generator | None = None, prefix: str = "clstm") -> "CLSTMParams":
        rng = rng or np.random.default_rng(0)
        kernels = rng.normal(0.0, INIT_STD, size=(4, 2, 3, 3))
        peephole = rng.normal(0.0, INIT_STD, size=3)
        bias = rng.normal(0.0, INIT_STD, size=4)
        bias[1] = FORGET_BIAS
        return cls(Tensor(kernels, True, f"{prefix}.kernels"), Tensor(peephole, True, f"{prefix}.peephole"),
                   Tensor(bias, True, f"{prefix}.bias"))

    @classmethod
    def zeros(cls) -> "CLSTMParams":
        return cls(Tensor(np.zeros((4, 2, 3, 3)), True), Tensor(np.zeros(3), True), Tensor(np.zeros(4), True))

    def kernel(self, name: str) -> np.ndarray:
        """Named 3x3 kernel, e.g. ``kernel("W_hf")``."""
        src, gate = name[2], name[3]
        return self.kernels.data[GATES.index(gate), 0 if src == "y" else 1]

    def parameters(self) -> list[tuple[str, Tensor]]:
        return [("kernels", self.kernels), ("peephole", self.peephole), ("bias", self.bias)]

    def copy(self) -> "CLSTMParams":
        return CLSTMParams(Tensor(self.kernels.data.copy(), True), Tensor(self.peephole.data.copy(), True),
                           Tensor(self.bias.data.copy(), True))


@dataclass
class BiRNNParams:
    """``backward`` runs in descending slice order (tau-), ``forward`` ascending (tau+).

    ``mix_logits`` holds (lambda-, lambda+).
    """

    backward: CLSTMParams
    forward: CLSTMParams
    mix_logits: Tensor

    @classmethod
    def create(cls, seed: int = 0) -> "BiRNNParams":
        rng = np.random.default_rng(seed)
        bwd = CLSTMParams.create(rng, "birnn.backward")
        fwd = CLSTMParams.create(rng, "birnn.forward")
        return cls(bwd, fwd, Tensor(np.zeros(2), True, "birnn.mix_logits"))

    @classmethod
    def zeros(cls) -> "BiRNNParams":
        return cls(CLSTMParams.zeros(), CLSTMParams.zeros(), Tensor(np.zeros(2), True))

    def parameters(self) -> list[tuple[str, Tensor]]:
        out = [(f"birnn.backward.{n}", t) for n, t in self.backward.parameters()]
        out += [(f"birnn.forward.{n}", t) for n, t in self.forward.parameters()]
        out.append(("birnn.mix_logits", self.mix_logits))
        for name, t in out:
            t.name = name
        return out

    def swapped(self) -> "BiRNNParams":
        """Same model with the two directions exchanged."""
        return BiRNNParams(self.forward.copy(), self.backward.copy(),
                           Tensor(self.mix_logits.data[::-1].copy(), True))


def clstm_cell(y: Tensor, h_prev: Tensor, c_prev: Tensor, p: CLSTMParams) -> tuple[Tensor, Tensor]:
    """One CLSTM step on ``[1,H,W]`` (or ``[N,1,H,W]``) maps; returns (H, C)."""
    if not (y.shape == h_prev.shape == c_prev.shape):
        raise ShapeError(f"clstm_cell: input {y.shape}, hidden {h_prev.shape}, cell {c_prev.shape} must match")
    if y.shape[-3] != 1:
        raise ShapeError(f"clstm_cell: maps must have one channel, got shape {y.shape}")
    pre = conv2d(concat_channels([y, h_prev]), p.kernels, p.bias, stride=1, pad=1)
    ch = (slice(None),) * (pre.ndim - 3)

    def gate(k):
        return pre[ch + (slice(k, k + 1),)]

    i = sigmoid(gate(0) + p.peephole[0] * c_prev)
    f = sigmoid(gate(1) + p.peephole[1] * c_prev)
    c = f * c_prev + i * tanh(gate(2))
    o = sigmoid(gate(3) + p.peephole[2] * c)
    h = o * tanh(c)
    return h, c


def _run(seq: Sequence[Tensor], p: CLSTMParams, order: Sequence[int]) -> dict[int, Tensor]:
    zero = Tensor(np.zeros(seq[0].shape))
    h, c = zero, zero
    out = {}
    for tau in order:
        h, c = clstm_cell(seq[tau], h, c, p)
        if not (np.isfinite(h.data).all() and np.isfinite(c.data).all()):
            raise NumericError(f"non-finite CLSTM state at slice {tau}")
        out[tau] = h
    return out


def _as_list(sequence) -> list[Tensor]:
    if isinstance(sequence, Tensor):
        return [sequence[t] for t in range(sequence.shape[0])]
    if isinstance(sequence, np.ndarray):
        return [Tensor(s) for s in sequence]
    return [s if isinstance(s, Tensor) else Tensor(s) for s in sequence]


def birnn_forward(sequence, params: BiRNNParams) -> list[Tensor]:
    """Refine ``Y^_1..Y^_T`` into ``Y-_1..Y-_T``.

    ``sequence`` may be a list of ``[1,H,W]`` tensors, a ``[T,1,H,W]`` tensor
    (e.g. a batch of CNN outputs, kept on the graph) or a numpy array.
    """
    seq = _as_list(sequence)
    if not seq:
        raise ValueError("birnn_forward: empty sequence")
    t = len(seq)
    up = _run(seq, params.forward, range(t))
    down = _run(seq, params.backward, range(t - 1, -1, -1))
    mix = softmax(params.mix_logits)
    return [mix[0] * ((down[k] + 1.0) * 0.5) + mix[1] * ((up[k] + 1.0) * 0.5) for k in range(t)]


def birnn_forward_stacked(sequence, params: BiRNNParams) -> Tensor:
    """``birnn_forward`` with the outputs stacked to ``[T,1,H,W]``."""
    return stack(birnn_forward(sequence, params), axis=0)


def clstm_param_count(p: CLSTMParams) -> tuple[int, int]:
    """(conv-kernel scalars, all learnable scalars) of one CLSTM layer."""
    conv = int(p.kernels.data.size)
    return conv, conv + int(p.peephole.data.size) + int(p.bias.data.size)
