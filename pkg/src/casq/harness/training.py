"""Training loop: Adam with warmup, gradient accumulation, early stopping.

There is no batch axis in the model, so a "batch" here is a list of
utterances whose mean loss gradient drives one optimizer step. With
grad_accum > 1 several such lists share a step; each utterance's backward
pass is pre-scaled by 1/N for the whole update group, which makes the
result equal (up to summation order) to a single step on the concatenated
group.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass

import numpy as np

from .. import tensor as T
from ..ctc import beam_search_joint, utterance_loss
from ..errors import ConfigError, NumericError, TrainingDiverged
from .data import Utterance
from .metrics import corpus_error_rate


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    grad_accum: int = 1
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    lr_schedule: str = "noam"     # "noam" or "fixed"
    lr: float = 1e-3              # used by the fixed schedule
    lr_factor: float = 1.0        # used by the noam schedule
    warmup_steps: int = 400
    ctc_weight: float | None = None   # overrides the model's when set
    target_dev_ter: float | None = None   # stop once dev TER falls this low
    seed: int = 0

    def validate(self):
        if self.epochs < 1 or self.batch_size < 1 or self.grad_accum < 1:
            raise ConfigError("epochs, batch_size, grad_accum must be positive")
        if self.lr_schedule not in ("noam", "fixed"):
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}")
        if not 0.0 <= self.beta1 < 1.0 or not 0.0 <= self.beta2 < 1.0:
            raise ConfigError("betas must lie in [0, 1)")
        if self.ctc_weight is not None and not 0.0 <= self.ctc_weight <= 1.0:
            raise ConfigError(f"ctc_weight {self.ctc_weight} outside [0, 1]")


def noam_lr(step: int, d_model: int, factor: float, warmup: int) -> float:
    """Inverse-sqrt schedule with linear warmup; peak near step = warmup."""
    if step < 1:
        raise ConfigError("schedule steps count from 1")
    return factor * d_model ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


class Adam:
    """Adam over a name -> tensor dict; missing gradients count as zero
    so every parameter sees the same step count."""

    def __init__(self, params: dict[str, T.Tensor], beta1=0.9, beta2=0.98, eps=1e-9):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, lr: float):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in self.params.items():
            g = p.grad if p.grad is not None else 0.0
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * np.square(g)
            update = (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            p.data = p.data - lr * update


class MetricsWriter:
    """One JSON object per line, keys sorted. Volatile wall-clock facts
    belong under the "timing" key so deterministic comparisons can drop
    exactly that subtree."""

    def __init__(self, stream):
        self.stream = stream

    def write(self, record: dict):
        self.stream.write(json.dumps(record, sort_keys=True) + "\n")
        self.stream.flush()


def decode_utterance(model, features: np.ndarray, beam_size=1, gamma=0.0,
                     max_len=None, length_norm=True):
    """Best hypothesis for one utterance's features."""
    with T.no_grad():
        enc = model.encode(features)
        hyps = beam_search_joint(model, enc, beam_size=beam_size, ctc_gamma=gamma,
                                 max_len=max_len, length_norm=length_norm)
    return hyps[0]


def evaluate(model, utts: list[Utterance], beam_size=1, gamma=0.0,
             length_norm=True):
    """Decode a split and score it; returns (report, per-utterance rows)."""
    rows = []
    pairs = []
    for u in utts:
        best = decode_utterance(model, u.features, beam_size=beam_size,
                                gamma=gamma, length_norm=length_norm)
        rows.append({"utt_id": u.utt_id, "ref": list(u.tokens),
                     "hyp": [int(t) for t in best.tokens],
                     "score": best.ranking})
        pairs.append((u.tokens, best.tokens))
    return corpus_error_rate(pairs), rows


def train(model, splits: dict[str, list[Utterance]], config: TrainConfig,
          writer: MetricsWriter | None = None) -> list[dict]:
    """Run the loop; returns the per-epoch records it wrote.

    Loss going non-finite aborts with the offending epoch/step/utterance
    in the message. With target_dev_ter set, training stops at the end of
    the first epoch whose dev error rate is at or below it.
    """
    config.validate()
    if config.ctc_weight is not None:
        model.config.ctc_weight = config.ctc_weight
    train_utts = splits["train"]
    if not train_utts:
        raise ConfigError("empty training split")
    dev_utts = splits.get("dev") or []
    opt = Adam(model.params(), config.beta1, config.beta2, config.eps)
    d_model = model.config.d_att
    group = config.batch_size * config.grad_accum
    ss = np.random.SeedSequence(config.seed)
    history: list[dict] = []
    step = 0
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        order_child, drop_child = ss.spawn(2)
        order = np.random.default_rng(order_child).permutation(len(train_utts))
        drop_rng = np.random.default_rng(drop_child)
        tot = {"joint": 0.0, "att": 0.0, "ctc": 0.0}
        n_att = n_ctc = 0
        lr = 0.0
        for start in range(0, len(order), group):
            idx = order[start : start + group]
            T.zero_grads(model.param_list())
            for j in idx:
                u = train_utts[int(j)]
                try:
                    loss, parts = utterance_loss(model, u.features, u.tokens,
                                                 training=True, rng=drop_rng)
                except NumericError as e:
                    raise TrainingDiverged(
                        f"non-finite values at epoch {epoch} step {step + 1} "
                        f"on {u.utt_id}: {e}"
                    ) from e
                if not np.isfinite(loss.item()):
                    raise TrainingDiverged(
                        f"loss {loss.item()} at epoch {epoch} step {step + 1} "
                        f"on {u.utt_id}: {parts}"
                    )
                T.backward(T.scale(loss, 1.0 / len(idx)))
                tot["joint"] += parts["joint"]
                if "att" in parts:
                    tot["att"] += parts["att"]
                    n_att += 1
                if "ctc" in parts:
                    tot["ctc"] += parts["ctc"]
                    n_ctc += 1
            step += 1
            if config.lr_schedule == "noam":
                lr = noam_lr(step, d_model, config.lr_factor, config.warmup_steps)
            else:
                lr = config.lr
            opt.step(lr)
        T.zero_grads(model.param_list())
        record = {
            "epoch": epoch,
            "train_loss": tot["joint"] / len(train_utts),
            "lr": lr,
            "steps": step,
            "timing": {"seconds": time.perf_counter() - t0},
        }
        if n_att:
            record["train_att"] = tot["att"] / n_att
        if n_ctc:
            record["train_ctc"] = tot["ctc"] / n_ctc
        if dev_utts:
            report, _ = evaluate(model, dev_utts)
            record["dev_ter"] = report["error_rate"]
        history.append(record)
        if writer is not None:
            writer.write(record)
        if (config.target_dev_ter is not None and dev_utts
                and record["dev_ter"] <= config.target_dev_ter):
            break
    return history
