"""CTC loss, prefix scoring, and joint attention/CTC beam search.

Index conventions: the CTC output has width vocab+1 with the blank at
column 0 and token t at column t+1. The shared start/end symbol of the
attention decoder never appears on the CTC side. All recursions run in
log space via logaddexp, so impossible states are exact -inf rather than
underflowed zeros.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError, VocabError

BLANK = 0
NEG_INF = -np.inf


def _check_targets(targets: Sequence[int], width: int) -> list[int]:
    out = [int(t) for t in targets]
    for t in out:
        if t < 0 or t + 1 >= width:
            raise VocabError(f"CTC target {t} outside vocabulary of size {width - 1}")
    return out


def ctc_feasible(n_frames: int, targets: Sequence[int]) -> bool:
    """A label sequence fits iff frames >= labels + adjacent repeats."""
    reps = sum(1 for a, b in zip(targets, targets[1:]) if a == b)
    return n_frames >= len(targets) + reps


def ctc_loss(
    log_probs: T.Tensor, targets: Sequence[int], valid_t: int | None = None
) -> T.Tensor:
    """Negative log probability of ``targets`` under the CTC alignment model.

    ``log_probs`` is (frames x vocab+1), rows already log-normalized. Only
    the first ``valid_t`` frames participate (all of them by default).
    Infeasible target lengths warn and return +inf with no gradient, since
    no alignment exists for them.
    """
    if log_probs.ndim != 2 or log_probs.shape[1] < 2:
        raise DimensionError(f"log_probs must be (frames, vocab+1), got {log_probs.shape}")
    t_len, width = log_probs.shape
    if valid_t is not None:
        if not 0 <= valid_t <= t_len:
            raise ContractError(f"valid_t {valid_t} outside [0, {t_len}]")
        t_len = valid_t
    labels = _check_targets(targets, width)
    if not ctc_feasible(t_len, labels):
        warnings.warn(
            f"CTC target of {len(labels)} labels does not fit in {t_len} frames; "
            "loss is +inf and carries no gradient"
        )
        return T.Tensor(np.inf)

    lp = log_probs.data[:t_len]
    ext = np.empty(2 * len(labels) + 1, dtype=np.int64)
    ext[0::2] = BLANK
    ext[1::2] = np.asarray(labels, dtype=np.int64) + 1
    s_len = ext.size
    # skip transition s-2 -> s is legal where ext[s] is a label differing
    # from ext[s-2]
    can_skip = np.zeros(s_len, dtype=bool)
    if s_len > 2:
        can_skip[2:] = (ext[2:] != BLANK) & (ext[2:] != ext[:-2])

    alpha = np.full((t_len, s_len), NEG_INF)
    alpha[0, 0] = lp[0, ext[0]]
    if s_len > 1:
        alpha[0, 1] = lp[0, ext[1]]
    for t in range(1, t_len):
        stay = alpha[t - 1]
        step = np.concatenate(([NEG_INF], alpha[t - 1, :-1]))
        acc = np.logaddexp(stay, step)
        if s_len > 2:
            skip = np.concatenate(([NEG_INF, NEG_INF], alpha[t - 1, :-2]))
            acc = np.where(can_skip, np.logaddexp(acc, skip), acc)
        alpha[t] = acc + lp[t, ext]
    log_p = np.logaddexp(alpha[t_len - 1, s_len - 1],
                         alpha[t_len - 1, s_len - 2] if s_len > 1 else NEG_INF)

    def build():
        def bwd(g):
            beta = np.full((t_len, s_len), NEG_INF)
            beta[t_len - 1, s_len - 1] = lp[t_len - 1, ext[s_len - 1]]
            if s_len > 1:
                beta[t_len - 1, s_len - 2] = lp[t_len - 1, ext[s_len - 2]]
            for t in range(t_len - 2, -1, -1):
                stay = beta[t + 1]
                step = np.concatenate((beta[t + 1, 1:], [NEG_INF]))
                acc = np.logaddexp(stay, step)
                if s_len > 2:
                    # the skip out of s is legal iff the landing state allows it
                    skip = np.concatenate((beta[t + 1, 2:], [NEG_INF, NEG_INF]))
                    skip_ok = np.zeros(s_len, dtype=bool)
                    skip_ok[:-2] = can_skip[2:]
                    acc = np.where(skip_ok, np.logaddexp(acc, skip), acc)
                beta[t] = acc + lp[t, ext]
            # posterior occupancy; alpha and beta both count lp at t once
            occ = np.exp(alpha + beta - lp[:, ext] - log_p)
            grad = np.zeros_like(log_probs.data)
            np.add.at(grad[:t_len], (np.arange(t_len)[:, None], ext[None, :]), -occ)
            T.accumulate_grad(log_probs, grad * float(g))

        return bwd

    return T.make_op(np.asarray(-log_p), (log_probs,), build)


def joint_objective(att_nll, ctc_nll, lam: float):
    """Interpolated loss ``lam * ctc_nll + (1 - lam) * att_nll``.

    Endpoint weights hand back the surviving branch unchanged, so a
    disabled branch never needs to be evaluated (callers may pass None
    for it). Accepts scalar tensors or plain floats.
    """
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"interpolation weight {lam} outside [0, 1]")
    if lam == 0.0:
        return att_nll
    if lam == 1.0:
        return ctc_nll
    if isinstance(att_nll, T.Tensor) or isinstance(ctc_nll, T.Tensor):
        a = att_nll if isinstance(att_nll, T.Tensor) else T.Tensor(float(att_nll))
        c = ctc_nll if isinstance(ctc_nll, T.Tensor) else T.Tensor(float(ctc_nll))
        return T.add(T.scale(a, 1.0 - lam), T.scale(c, lam))
    return (1.0 - lam) * float(att_nll) + lam * float(ctc_nll)


def utterance_loss(
    model,
    features: np.ndarray,
    tokens: Sequence[int],
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[T.Tensor, dict[str, float]]:
    """Joint objective for one utterance under the model's ctc_weight.

    The attention term sums cross-entropy over the target positions (the
    sequence plus the end symbol); with ctc_weight 0 or 1 the unused
    branch is skipped entirely.
    """
    cfg = model.config
    lam = cfg.ctc_weight
    enc = model.encode(features, training=training, rng=rng)
    tokens = list(tokens)
    parts: dict[str, float] = {}
    att = None
    closs = None
    if lam < 1.0:
        lp = T.log_softmax_rows(
            model.att_logits(enc, [model.sos_id] + tokens, training=training, rng=rng)
        )
        nll = T.scale(T.tsum(T.pick_rows(lp, tokens + [model.eos_id])), -1.0)
        if cfg.label_smoothing > 0.0:
            eps = cfg.label_smoothing
            uniform = T.scale(T.tsum(lp), -1.0 / (cfg.vocab_size + 1))
            att = T.add(T.scale(nll, 1.0 - eps), T.scale(uniform, eps))
        else:
            att = nll
        parts["att"] = att.item()
    if lam > 0.0:
        closs = ctc_loss(T.log_softmax_rows(model.ctc_logits(enc)), tokens)
        parts["ctc"] = closs.item()
    total = joint_objective(att, closs, lam)
    parts["joint"] = total.item()
    return total, parts


# ---------------------------------------------------------------------------
# Prefix scoring
# ---------------------------------------------------------------------------


@dataclass
class CtcPrefixState:
    """Per-hypothesis scorer state.

    ``r_n[t]`` / ``r_b[t]`` are the log probabilities that frames 0..t
    emit exactly the prefix with the path ending on its last label /
    on a blank after it. ``psi`` is the log prefix probability: the mass
    of all complete paths whose collapsed output starts with the prefix.
    """

    prefix: tuple[int, ...]
    r_n: np.ndarray
    r_b: np.ndarray
    psi: float


class CtcPrefixScorer:
    """Incremental prefix probabilities over a fixed encoder output.

    Extending a prefix by one token costs O(frames) per candidate; the
    candidate set is scored in one vectorized sweep.
    """

    def __init__(self, log_probs: np.ndarray):
        lp = np.asarray(log_probs, dtype=np.float64)
        if lp.ndim != 2 or lp.shape[1] < 2:
            raise DimensionError(f"log_probs must be (frames, vocab+1), got {lp.shape}")
        if lp.shape[0] < 1:
            raise DimensionError("prefix scorer needs at least one frame")
        self.lp = lp
        self.n_frames, self._width = lp.shape
        self.vocab = self._width - 1

    def initial_state(self) -> CtcPrefixState:
        # the empty prefix is produced exactly by all-blank paths, and is
        # a prefix of everything: psi = log 1
        r_b = np.cumsum(self.lp[:, BLANK])
        r_n = np.full(self.n_frames, NEG_INF)
        return CtcPrefixState((), r_n, r_b, 0.0)

    def score_candidates(
        self, state: CtcPrefixState, tokens: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Log prefix probability of state.prefix + (c,) for each candidate.

        Returns (psi, r_n, r_b) where psi has one entry per candidate and
        the recursion arrays are (frames x candidates) columns for the
        corresponding successor states.
        """
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.vocab):
            raise VocabError(f"candidate outside vocabulary of size {self.vocab}")
        n_c = tokens.size
        lp_c = self.lp[:, tokens + 1]  # (frames, candidates)
        lp_b = self.lp[:, BLANK]
        last = state.prefix[-1] if state.prefix else None

        r_n = np.empty((self.n_frames, n_c))
        r_b = np.empty((self.n_frames, n_c))
        # a candidate can only start at frame 0 when the prefix is empty
        start0 = 0.0 if not state.prefix else NEG_INF
        r_n[0] = start0 + lp_c[0]
        r_b[0] = NEG_INF
        psi = r_n[0].copy()
        # same-label extensions cannot reuse the label-final mass: the
        # path needs an intervening blank
        rn_prev = np.where(tokens == last, NEG_INF, 0.0) if state.prefix else np.full(n_c, NEG_INF)
        for t in range(1, self.n_frames):
            phi = np.logaddexp(state.r_b[t - 1], rn_prev + state.r_n[t - 1])
            r_n[t] = np.logaddexp(r_n[t - 1], phi) + lp_c[t]
            r_b[t] = np.logaddexp(r_b[t - 1], r_n[t - 1]) + lp_b[t]
            psi = np.logaddexp(psi, phi + lp_c[t])
        return psi, r_n, r_b

    def extend(self, state: CtcPrefixState, token: int) -> CtcPrefixState:
        psi, r_n, r_b = self.score_candidates(state, np.asarray([token]))
        return CtcPrefixState(
            state.prefix + (int(token),), r_n[:, 0], r_b[:, 0], float(psi[0])
        )

    def eos_score(self, state: CtcPrefixState) -> float:
        """Log probability that the prefix is the complete sequence."""
        if not state.prefix:
            return float(state.r_b[-1])
        return float(np.logaddexp(state.r_n[-1], state.r_b[-1]))


def ctc_prefix_score(log_probs: np.ndarray, prefix: Sequence[int]) -> float:
    """Log prefix probability of ``prefix``, folding extend over tokens."""
    scorer = CtcPrefixScorer(log_probs)
    state = scorer.initial_state()
    for tok in prefix:
        state = scorer.extend(state, int(tok))
    return state.psi


# ---------------------------------------------------------------------------
# Joint beam search
# ---------------------------------------------------------------------------


@dataclass
class Hypothesis:
    """A finished beam entry.

    ``prefix`` carries the start symbol in slot 0; ``tokens`` strips it.
    ``score`` is the raw joint log probability (1-g)*att + g*ctc, and
    ``ranking`` is the sort key: score / (len(tokens) + 1) under length
    normalization, score itself otherwise.
    """

    prefix: tuple[int, ...]
    att_logp: float
    ctc_logp: float
    score: float
    ranking: float

    @property
    def tokens(self) -> tuple[int, ...]:
        return self.prefix[1:]


@dataclass
class _Live:
    tokens: tuple[int, ...]
    att_logp: float
    state: CtcPrefixState | None


def beam_search_joint(
    model,
    enc: T.Tensor,
    beam_size: int = 4,
    ctc_gamma: float = 0.3,
    max_len: int | None = None,
    length_norm: bool = True,
) -> list[Hypothesis]:
    """Label-synchronous beam search over (1-g)*attention + g*CTC.

    With ``ctc_gamma`` 0 the CTC machinery is never touched, so encoder
    outputs too short for any alignment still decode. Candidate-level CTC
    scores are prefix probabilities; finishing a hypothesis swaps in the
    exact full-sequence probability. Ties break toward the smaller token
    sequence. Returns at most ``beam_size`` finished hypotheses, best
    first.
    """
    if beam_size < 1:
        raise ContractError(f"beam_size must be positive, got {beam_size}")
    if not 0.0 <= ctc_gamma <= 1.0:
        raise ContractError(f"ctc_gamma must be in [0, 1], got {ctc_gamma}")
    vocab = model.config.vocab_size
    if max_len is None:
        max_len = 2 * enc.shape[0]
    max_len = max(1, int(max_len))

    with T.no_grad():
        scorer = None
        if ctc_gamma > 0.0:
            scorer = CtcPrefixScorer(T.log_softmax_rows(model.ctc_logits(enc)).data)
        all_tokens = np.arange(vocab)

        def att_row(tokens: tuple[int, ...]) -> np.ndarray:
            logits = model.att_logits(enc, [model.sos_id, *tokens])
            return T.log_softmax_rows(T.slice_rc(logits, rows=slice(-1, None))).data[0]

        def combine(att: float, ctc: float) -> float:
            if scorer is None:
                return att
            return (1.0 - ctc_gamma) * att + ctc_gamma * ctc

        def finish(tokens, att_logp, state) -> Hypothesis:
            ctc_exact = scorer.eos_score(state) if scorer is not None else 0.0
            comb = combine(att_logp, ctc_exact)
            norm = comb / (len(tokens) + 1) if length_norm else comb
            return Hypothesis((model.sos_id, *tokens), att_logp, ctc_exact, comb, norm)

        live = [_Live((), 0.0, scorer.initial_state() if scorer else None)]
        finished: list[Hypothesis] = []
        for _ in range(max_len):
            pool = []  # (combined, tokens, is_eos, att_logp, state_maker)
            for item in live:
                lp = att_row(item.tokens)
                if scorer is not None:
                    psi, r_n, r_b = scorer.score_candidates(item.state, all_tokens)
                for c in range(vocab):
                    att_new = item.att_logp + lp[c]
                    ctc_new = psi[c] if scorer is not None else 0.0
                    pool.append(
                        (
                            combine(att_new, ctc_new),
                            item.tokens + (c,),
                            False,
                            att_new,
                            (item, c, None)
                            if scorer is None
                            else (item, c, (psi, r_n, r_b)),
                        )
                    )
                att_eos = item.att_logp + lp[vocab]
                ctc_eos = scorer.eos_score(item.state) if scorer is not None else 0.0
                pool.append((combine(att_eos, ctc_eos), item.tokens, True, att_eos, (item, None, None)))
            pool.sort(key=lambda e: (-e[0], e[1]))
            live = []
            for comb, tokens, is_eos, att_logp, cell in pool[:beam_size]:
                item, c, arrs = cell
                if is_eos:
                    finished.append(finish(tokens, att_logp, item.state))
                    continue
                if scorer is None:
                    state = None
                else:
                    psi, r_n, r_b = arrs
                    state = CtcPrefixState(tokens, r_n[:, c], r_b[:, c], float(psi[c]))
                live.append(_Live(tokens, att_logp, state))
            if not live:
                break
        # length cap reached: close out what is still open with an end score
        for item in live:
            lp = att_row(item.tokens)
            finished.append(finish(item.tokens, item.att_logp + lp[vocab], item.state))

    finished.sort(key=lambda h: (-h.ranking, h.tokens))
    return finished[:beam_size]
