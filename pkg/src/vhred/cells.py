"""GRU and LSTM cells plus sequence encoders.

Cells work on single vectors ``(d,)`` or row batches ``(B, d)`` alike since
every op broadcasts over rows.  An LSTM state is the concatenation
``[hidden ; cell]`` so both cell types expose one state vector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (ContractError, DimensionError, Tensor, cols, concat, sigmoid,
                     tanh, where_rows)


def orthogonal(rng: np.random.Generator, n: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def scaled_uniform(rng: np.random.Generator, n_in: int, n_out: int) -> np.ndarray:
    s = np.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-s, s, size=(n_in, n_out))


def _check(x: Tensor, width: int, what: str):
    if x.shape[-1] != width:
        raise DimensionError(f"{what}: expected last dimension {width}, got shape {x.shape}")


class GruParams:
    """Weights of one GRU layer.

    ``w_x`` stacks the input maps of the reset, update and candidate gates
    column-wise; ``u_rz`` holds the recurrent maps of reset and update,
    ``u_c`` the candidate's.
    """

    kind = "gru"

    def __init__(self, n_in: int, hidden: int, rng: np.random.Generator | None = None):
        self.n_in, self.hidden = n_in, hidden
        if rng is None:
            w_x = np.zeros((n_in, 3 * hidden))
            u_rz = np.zeros((hidden, 2 * hidden))
            u_c = np.zeros((hidden, hidden))
        else:
            w_x = np.hstack([scaled_uniform(rng, n_in, hidden) for _ in range(3)])
            u_rz = np.hstack([orthogonal(rng, hidden) for _ in range(2)])
            u_c = orthogonal(rng, hidden)
        self.w_x = Tensor(w_x, requires_grad=True)
        self.u_rz = Tensor(u_rz, requires_grad=True)
        self.u_c = Tensor(u_c, requires_grad=True)
        self.b = Tensor(np.zeros(3 * hidden), requires_grad=True)

    @property
    def state_size(self) -> int:
        return self.hidden

    def params(self) -> dict[str, Tensor]:
        return {"w_x": self.w_x, "u_rz": self.u_rz, "u_c": self.u_c, "b": self.b}

    def project_input(self, x: Tensor) -> Tensor:
        return x @ self.w_x + self.b

    def step(self, h_prev: Tensor, x: Tensor) -> Tensor:
        _check(x, self.n_in, "gru_step input")
        return self.step_projected(h_prev, self.project_input(x))

    def step_projected(self, h_prev: Tensor, xw: Tensor) -> Tensor:
        """GRU update from a precomputed ``x @ w_x + b``."""
        _check(h_prev, self.hidden, "gru_step state")
        d = self.hidden
        rz = sigmoid(cols(xw, 0, 2 * d) + h_prev @ self.u_rz)
        r, z = cols(rz, 0, d), cols(rz, d, 2 * d)
        cand = tanh(cols(xw, 2 * d, 3 * d) + (r * h_prev) @ self.u_c)
        return cand + z * (h_prev - cand)


class LstmParams:
    """Weights of one LSTM layer, gates ordered input, forget, output, candidate."""

    kind = "lstm"

    def __init__(self, n_in: int, hidden: int, rng: np.random.Generator | None = None):
        self.n_in, self.hidden = n_in, hidden
        if rng is None:
            w_x = np.zeros((n_in, 4 * hidden))
            u = np.zeros((hidden, 4 * hidden))
        else:
            w_x = np.hstack([scaled_uniform(rng, n_in, hidden) for _ in range(4)])
            u = np.hstack([orthogonal(rng, hidden) for _ in range(4)])
        b = np.zeros(4 * hidden)
        b[hidden:2 * hidden] = 1.0
        self.w_x = Tensor(w_x, requires_grad=True)
        self.u = Tensor(u, requires_grad=True)
        self.b = Tensor(b, requires_grad=True)

    @property
    def state_size(self) -> int:
        return 2 * self.hidden

    def params(self) -> dict[str, Tensor]:
        return {"w_x": self.w_x, "u": self.u, "b": self.b}

    def project_input(self, x: Tensor) -> Tensor:
        return x @ self.w_x + self.b

    def step(self, state_prev: Tensor, x: Tensor) -> Tensor:
        _check(x, self.n_in, "lstm_step input")
        return self.step_projected(state_prev, self.project_input(x))

    def step_projected(self, state_prev: Tensor, xw: Tensor) -> Tensor:
        _check(state_prev, 2 * self.hidden, "lstm_step state")
        d = self.hidden
        h, c = cols(state_prev, 0, d), cols(state_prev, d, 2 * d)
        a = xw + h @ self.u
        gates = sigmoid(cols(a, 0, 3 * d))
        i, f, o = cols(gates, 0, d), cols(gates, d, 2 * d), cols(gates, 2 * d, 3 * d)
        c_new = f * c + i * tanh(cols(a, 3 * d, 4 * d))
        return concat([o * tanh(c_new), c_new])

    @staticmethod
    def hidden_part(state: Tensor, hidden: int) -> Tensor:
        return cols(state, 0, hidden)


def gru_step(p: GruParams, h_prev: Tensor, x: Tensor) -> Tensor:
    return p.step(h_prev, x)


def lstm_step(p: LstmParams, state_prev: Tensor, x: Tensor) -> Tensor:
    return p.step(state_prev, x)


def output_part(cell, state: Tensor) -> Tensor:
    """The part of a state that downstream layers read (LSTM: hidden half)."""
    if cell.kind == "lstm":
        return cols(state, 0, cell.hidden)
    return state


@dataclass
class EncoderOutput:
    final: Tensor
    sequence: list[Tensor]


def encode_sequence(cell, embeddings: list[Tensor], h0: Tensor, bidirectional: bool = False,
                    backward_cell=None) -> EncoderOutput:
    """Run ``cell`` over ``embeddings``.

    Bidirectional mode runs ``backward_cell`` (default: ``cell`` itself) over
    the reversed sequence from the same ``h0`` and concatenates the two final
    states; per-step outputs are the aligned forward/backward pairs.
    """
    if not embeddings:
        raise ContractError("encode_sequence needs a nonempty sequence")
    fwd = []
    h = h0
    for x in embeddings:
        h = cell.step(h, x)
        fwd.append(h)
    if not bidirectional:
        return EncoderOutput(final=fwd[-1], sequence=fwd)
    bcell = cell if backward_cell is None else backward_cell
    bwd = []
    h = h0
    for x in reversed(embeddings):
        h = bcell.step(h, x)
        bwd.append(h)
    bwd.reverse()
    seq = [concat([f, b]) for f, b in zip(fwd, bwd)]
    return EncoderOutput(final=concat([fwd[-1], bwd[0]]), sequence=seq)


def run_masked(cell, xw_steps: list[Tensor], mask: np.ndarray, h0: Tensor) -> Tensor:
    """Batched left fold over padded rows; returns each row's last valid state.

    ``xw_steps[t]`` is the projected input at step ``t`` for all rows and
    ``mask[:, t]`` says which rows are still inside their sequence.  Rows stop
    updating once their mask turns off, so the final state is exact.
    """
    h = h0
    for t, xw in enumerate(xw_steps):
        h = where_rows(mask[:, t], cell.step_projected(h, xw), h)
    return h
