"""LSTM cells with selectable forget-gate wiring.

The standard cell drives every gate from [h_{t-1}, features, embedding].
The customized cell differs in exactly one place: its forget gate sees only
[h_{t-1}, embedding], so what is retained in the cell state depends on the
target speaker and not on the current mixture frame. Input gate, cell
update, and output gate are identical in both variants.

Gate pre-activations are computed as separate hidden/feature/embedding
products summed as ((Wh·h + Wr·r) + We·e) + b, so a standard cell whose
feature block is zero reproduces the customized cell bit for bit.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class GateWiring(enum.Enum):
    """Which inputs feed the forget gate."""

    STANDARD = "standard"      # [h, features, embedding]
    CUSTOMIZED = "customized"  # [h, embedding] only

    @classmethod
    def parse(cls, name: str) -> "GateWiring":
        for member in cls:
            if member.value == name:
                return member
        raise ValueError(f"unknown wiring {name!r}; expected 'standard' or 'customized'")


@dataclass
class LstmParams:
    """Weights and biases of one cell.

    Weight layout per gate is [hidden | features | embedding] columns;
    the customized forget gate has no feature block.
    """

    hidden_size: int
    feature_size: int
    embed_size: int
    wiring: GateWiring
    w_forget: Tensor
    w_input: Tensor
    w_cell: Tensor
    w_output: Tensor
    b_forget: Tensor
    b_input: Tensor
    b_cell: Tensor
    b_output: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, hidden_size: int, feature_size: int,
             embed_size: int, wiring: GateWiring = GateWiring.STANDARD,
             dtype=np.float64) -> "LstmParams":
        """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) weights; zero biases
        except the forget bias, which starts at 1 to favor retention."""
        full_width = hidden_size + feature_size + embed_size
        forget_width = full_width if wiring is GateWiring.STANDARD else hidden_size + embed_size

        def weight(width):
            bound = 1.0 / np.sqrt(width)
            return ad.parameter(rng.uniform(-bound, bound, (hidden_size, width)), dtype=dtype)

        def bias(value=0.0):
            return ad.parameter(np.full((hidden_size, 1), value), dtype=dtype)

        return cls(
            hidden_size=hidden_size, feature_size=feature_size,
            embed_size=embed_size, wiring=wiring,
            w_forget=weight(forget_width), w_input=weight(full_width),
            w_cell=weight(full_width), w_output=weight(full_width),
            b_forget=bias(1.0), b_input=bias(), b_cell=bias(), b_output=bias(),
        )

    def parameters(self) -> list[Tensor]:
        return [self.w_forget, self.w_input, self.w_cell, self.w_output,
                self.b_forget, self.b_input, self.b_cell, self.b_output]

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return {prefix + name: tensor for name, tensor in zip(
            ("w_forget", "w_input", "w_cell", "w_output",
             "b_forget", "b_input", "b_cell", "b_output"), self.parameters())}


@dataclass
class LstmState:
    h: Tensor  # (hidden, 1)
    c: Tensor  # (hidden, 1)


def zero_state(params: LstmParams, dtype=None) -> LstmState:
    dtype = dtype or params.w_input.dtype
    shape = (params.hidden_size, 1)
    return LstmState(ad.constant(np.zeros(shape), dtype=dtype),
                     ad.constant(np.zeros(shape), dtype=dtype))


def _check_step_inputs(params: LstmParams, state: LstmState, r_t: Tensor, e: Tensor):
    if r_t.shape != (params.feature_size, 1):
        raise ad.ShapeError(
            f"features: expected {(params.feature_size, 1)}, got {r_t.shape}")
    if e.shape != (params.embed_size, 1):
        raise ad.ShapeError(
            f"embedding: expected {(params.embed_size, 1)}, got {e.shape}")
    if state.h.shape != (params.hidden_size, 1) or state.c.shape != (params.hidden_size, 1):
        raise ad.ShapeError(
            f"state: expected {(params.hidden_size, 1)}, got h={state.h.shape} c={state.c.shape}")


class _GateBlocks:
    """Hidden/feature/embedding column blocks of each gate matrix, split
    once so a sequence run reuses the same narrow nodes every step."""

    def __init__(self, params: LstmParams):
        h, f, e = params.hidden_size, params.feature_size, params.embed_size
        self.params = params

        def split(w, has_features):
            wh = ad.narrow(w, 1, 0, h)
            wr = ad.narrow(w, 1, h, f) if has_features else None
            offset = h + (f if has_features else 0)
            we = ad.narrow(w, 1, offset, e) if e > 0 else None
            return wh, wr, we

        standard = params.wiring is GateWiring.STANDARD
        self.forget = split(params.w_forget, has_features=standard)
        self.input = split(params.w_input, has_features=True)
        self.cell = split(params.w_cell, has_features=True)
        self.output = split(params.w_output, has_features=True)

    def embed_terms(self, e: Tensor):
        """Per-gate We·e products, computed once per sequence."""
        def term(blocks):
            we = blocks[2]
            return ad.matmul(we, e) if we is not None else None
        return tuple(term(b) for b in (self.forget, self.input, self.cell, self.output))


def _gate_pre(blocks, h_prev: Tensor, r_term, e_term, b: Tensor) -> Tensor:
    # association is ((Wh·h + Wr·r) + We·e) + b so that a zero feature
    # block leaves the remaining sum bitwise unchanged
    pre = ad.matmul(blocks[0], h_prev)
    if r_term is not None:
        pre = ad.add(pre, r_term)
    if e_term is not None:
        pre = ad.add(pre, e_term)
    return ad.add(pre, b)


def step_with_gates(params: LstmParams, state: LstmState, r_t: Tensor, e: Tensor):
    """One cell step; returns (new state, gate activations dict)."""
    _check_step_inputs(params, state, r_t, e)
    blocks = _GateBlocks(params)
    e_terms = blocks.embed_terms(e)
    return _step(params, blocks, e_terms, state,
                 r_forget=ad.matmul(blocks.forget[1], r_t) if blocks.forget[1] is not None else None,
                 r_input=ad.matmul(blocks.input[1], r_t),
                 r_cell=ad.matmul(blocks.cell[1], r_t),
                 r_output=ad.matmul(blocks.output[1], r_t))


def _step(params, blocks, e_terms, state, r_forget, r_input, r_cell, r_output):
    f_t = ad.sigmoid(_gate_pre(blocks.forget, state.h, r_forget, e_terms[0], params.b_forget))
    i_t = ad.sigmoid(_gate_pre(blocks.input, state.h, r_input, e_terms[1], params.b_input))
    c_cand = ad.tanh_op(_gate_pre(blocks.cell, state.h, r_cell, e_terms[2], params.b_cell))
    o_t = ad.sigmoid(_gate_pre(blocks.output, state.h, r_output, e_terms[3], params.b_output))
    c_t = ad.add(ad.mul(f_t, state.c), ad.mul(i_t, c_cand))
    h_t = ad.mul(o_t, ad.tanh_op(c_t))
    gates = {"forget": f_t, "input": i_t, "candidate": c_cand, "output": o_t}
    return LstmState(h_t, c_t), gates


def step_standard(params: LstmParams, state: LstmState, r_t: Tensor, e: Tensor) -> LstmState:
    """Forget gate driven by [h, features, embedding] (the standard cell)."""
    if params.wiring is not GateWiring.STANDARD:
        raise ValueError("params are wired for the customized cell")
    return step_with_gates(params, state, r_t, e)[0]


def step_customized(params: LstmParams, state: LstmState, r_t: Tensor, e: Tensor) -> LstmState:
    """Forget gate driven by [h, embedding] only; other gates unchanged."""
    if params.wiring is not GateWiring.CUSTOMIZED:
        raise ValueError("params are wired for the standard cell")
    return step_with_gates(params, state, r_t, e)[0]


def run_sequence(params: LstmParams, features, e) -> Tensor:
    """Run the cell over feature columns, returning all hidden states (H, T).

    ``features`` is (feature_size, T); the embedding is broadcast to every
    step. Initial state is zero. Feature products are batched over time up
    front, which leaves the per-step math identical to the single-step path.
    """
    if not isinstance(features, Tensor):
        features = ad.constant(features)
    if not isinstance(e, Tensor):
        e = ad.constant(np.asarray(e).reshape(params.embed_size, 1))
    if features.data.ndim != 2 or features.shape[0] != params.feature_size:
        raise ad.ShapeError(
            f"features: expected ({params.feature_size}, T), got {features.shape}")
    n_steps = features.shape[1]
    if n_steps < 1:
        raise ValueError("empty sequence")

    blocks = _GateBlocks(params)
    e_terms = blocks.embed_terms(e)
    r_all = {name: ad.matmul(getattr(blocks, name)[1], features)
             for name in ("input", "cell", "output")}
    if blocks.forget[1] is not None:
        r_all["forget"] = ad.matmul(blocks.forget[1], features)

    state = zero_state(params, dtype=features.dtype)
    hidden = []
    for t in range(n_steps):
        col = {name: ad.narrow(mat, 1, t, 1) for name, mat in r_all.items()}
        state, _ = _step(params, blocks, e_terms, state,
                         r_forget=col.get("forget"),
                         r_input=col["input"], r_cell=col["cell"], r_output=col["output"])
        hidden.append(state.h)
    return ad.concat(hidden, axis=1)
