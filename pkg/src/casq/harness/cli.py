"""Command line entry point.

Subcommands: gen-data, train, eval, decode, bench, gradcheck. Metrics go
to stdout as one JSON object per line (decode emits tab-separated text
instead). Model presets name the studied encoder/decoder combinations;
kernel sizes and sharing counts follow the published configurations while
depth and width default to desk scale, with --paper-scale restoring the
published dimensions.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys

import numpy as np

from .. import tensor as T
from ..convlayers import dconv, dconv_f, init_conv_block, lconv, lconv_f
from ..attention import init_multi_head, self_attention
from ..ctc import ctc_loss, utterance_loss
from ..errors import CasqError, ConfigError
from ..gradcheck import finite_difference_check
from ..model import ModelConfig, Model, build_model, load_checkpoint, save_checkpoint
from .bench import BENCH_KINDS, DEFAULT_LENGTHS, bench_scaling
from .data import TASKS, SyntheticTaskSpec, generate_dataset, load_split, save_split
from .training import MetricsWriter, TrainConfig, evaluate, train

DESK_DIMS = {"n_enc": 2, "n_dec": 2, "d_att": 64, "d_ff": 128, "n_heads": 4}
PAPER_DIMS = {"n_enc": 12, "n_dec": 6, "d_att": 256, "d_ff": 2048, "n_heads": 4}

# encoder/decoder combination presets; kernel sizes and sharing counts
# are the published per-combination values
PRESETS = {
    "sa": {"encoder_type": "sa", "decoder_type": "sa"},
    "lc": {"encoder_type": "lconv", "decoder_type": "lconv",
           "n_shared": 4, "kernel_enc": 101, "kernel_dec": 71},
    "dc": {"encoder_type": "dconv", "decoder_type": "dconv",
           "n_shared": 4, "kernel_enc": 101, "kernel_dec": 71},
    "lc2d": {"encoder_type": "lconv2d", "decoder_type": "lconv2d",
             "n_shared": 16, "kernel_enc": 101, "kernel_dec": 71},
    "dc2d": {"encoder_type": "dconv2d", "decoder_type": "dconv2d",
             "n_shared": 2, "kernel_enc": 31, "kernel_dec": 11},
    "sa-lc": {"encoder_type": "sa", "decoder_type": "lconv",
              "n_shared": 8, "kernel_dec": 31},
    "sa-dc": {"encoder_type": "sa", "decoder_type": "dconv",
              "n_shared": 8, "kernel_dec": 31},
    "sa-lc2d": {"encoder_type": "sa", "decoder_type": "lconv2d",
                "n_shared": 4, "kernel_dec": 11},
    "sa-dc2d": {"encoder_type": "sa", "decoder_type": "dconv2d",
                "n_shared": 4, "kernel_dec": 11},
}

_MODEL_FIELDS = {f.name: f for f in dataclasses.fields(ModelConfig)}
_TRAIN_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}


def parse_config_file(path: str) -> dict[str, str]:
    """Flat `key = value` lines; # starts a comment."""
    out: dict[str, str] = {}
    with open(path) as f:
        for ln, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{ln}: expected key = value, got {raw.rstrip()!r}")
            key, val = line.split("=", 1)
            key = key.strip()
            if key in out:
                raise ConfigError(f"{path}:{ln}: duplicate key {key!r}")
            out[key] = val.strip()
    return out


def _coerce(name: str, text: str, ann) -> object:
    ann = str(ann)
    try:
        if "bool" in ann:
            low = text.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(text)
        if "int" in ann and "None" in ann:
            return None if text.lower() == "none" else int(text)
        if "int" in ann:
            return int(text)
        if "float" in ann and "None" in ann:
            return None if text.lower() == "none" else float(text)
        if "float" in ann:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"config key {name!r}: cannot parse {text!r} as {ann}")


def split_config_overrides(raw: dict[str, str]) -> tuple[dict, dict]:
    """Partition file keys into model/train config dicts; reject strangers."""
    model: dict[str, object] = {}
    tr: dict[str, object] = {}
    for key, text in raw.items():
        if key in _MODEL_FIELDS:
            model[key] = _coerce(key, text, _MODEL_FIELDS[key].type)
        elif key in _TRAIN_FIELDS:
            tr[key] = _coerce(key, text, _TRAIN_FIELDS[key].type)
        else:
            raise ConfigError(f"unknown config key {key!r}")
    return model, tr


def build_model_config(args, vocab_size: int, feat_dim: int,
                       file_model: dict) -> ModelConfig:
    """Defaults, then desk dims, preset, --paper-scale, config file, and
    explicit flags, in that order of increasing precedence."""
    cfg: dict[str, object] = dict(DESK_DIMS)
    if args.preset:
        cfg.update(PRESETS[args.preset])
    if getattr(args, "paper_scale", False):
        cfg.update(PAPER_DIMS)
    cfg.update(file_model)
    for flag in ("ctc_weight", "dropconnect", "subsample_factor", "label_smoothing"):
        val = getattr(args, flag, None)
        if val is not None:
            cfg[flag] = val
    cfg["vocab_size"] = vocab_size
    cfg["feat_dim"] = feat_dim
    return ModelConfig(**cfg)


def _load_data_split(data_dir: str, split: str):
    path = os.path.join(data_dir, split + ".data")
    if not os.path.exists(path):
        raise ConfigError(f"no {split} split at {path}")
    return load_split(path)


def _writer() -> MetricsWriter:
    return MetricsWriter(sys.stdout)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    spec = SyntheticTaskSpec(
        task=args.task, vocab_size=args.vocab_size, feat_dim=args.feat_dim,
        t_min=args.t_min, t_max=args.t_max, noise_std=args.noise_std,
        n_train=args.n_train, n_dev=args.n_dev, n_test=args.n_test,
        seed=args.seed, frames_per_token=args.frames_per_token,
    )
    ds = generate_dataset(spec)
    os.makedirs(args.out, exist_ok=True)
    w = _writer()
    for split, utts in ds.splits.items():
        path = os.path.join(args.out, split + ".data")
        save_split(path, utts, spec)
        w.write({"record": "dataset", "split": split, "path": path,
                 "n_utts": len(utts), "task": spec.task,
                 "vocab_size": spec.vocab_size, "feat_dim": spec.feat_dim,
                 "seed": spec.seed})
    return 0


def cmd_train(args) -> int:
    file_model, file_train = ({}, {})
    if args.config:
        file_model, file_train = split_config_overrides(parse_config_file(args.config))
    train_utts, header = _load_data_split(args.data, "train")
    splits = {"train": train_utts}
    dev_path = os.path.join(args.data, "dev.data")
    if os.path.exists(dev_path):
        splits["dev"], dev_header = load_split(dev_path)
        if dev_header["vocab_size"] != header["vocab_size"]:
            raise ConfigError("train and dev splits disagree on vocabulary size")
    mcfg = build_model_config(args, header["vocab_size"], header["feat_dim"], file_model)
    model = build_model(mcfg, seed=args.seed)

    tkw: dict[str, object] = dict(file_train)
    for flag in ("epochs", "batch_size", "grad_accum", "lr_factor", "warmup_steps",
                 "lr", "lr_schedule", "target_dev_ter"):
        val = getattr(args, flag, None)
        if val is not None:
            tkw[flag] = val
    tkw.setdefault("seed", args.seed)
    tcfg = TrainConfig(**tkw)

    w = _writer()
    w.write({"record": "config", "model": dataclasses.asdict(mcfg),
             "train": dataclasses.asdict(tcfg), "n_params": model.n_params()})
    history = train(model, splits, tcfg, writer=w)
    if args.save:
        save_checkpoint(args.save, model)
        w.write({"record": "checkpoint", "path": args.save})
    if history and "dev_ter" in history[-1]:
        w.write({"record": "final", "dev_ter": history[-1]["dev_ter"],
                 "epochs_run": len(history)})
    return 0


def _restore(args, header) -> Model:
    file_model = {}
    if args.config:
        file_model, _ = split_config_overrides(parse_config_file(args.config))
    mcfg = build_model_config(args, header["vocab_size"], header["feat_dim"], file_model)
    model = build_model(mcfg, seed=args.seed)
    if args.ckpt:
        load_checkpoint(args.ckpt, model)
    return model


def cmd_eval(args) -> int:
    import time

    utts, header = _load_data_split(args.data, args.split)
    model = _restore(args, header)
    w = _writer()
    t0 = time.perf_counter()
    report, rows = evaluate(model, utts, beam_size=args.beam, gamma=args.gamma,
                            length_norm=not args.no_length_norm)
    for r in rows:
        w.write({"record": "utt", **r})
    w.write({"record": "eval_summary", "split": args.split, **report,
             "beam": args.beam, "gamma": args.gamma,
             "timing": {"seconds": time.perf_counter() - t0}})
    return 0


def cmd_decode(args) -> int:
    utts, header = _load_data_split(args.data, args.split)
    model = _restore(args, header)
    _, rows = evaluate(model, utts, beam_size=args.beam, gamma=args.gamma,
                       length_norm=not args.no_length_norm)
    for r in rows:
        toks = " ".join(str(t) for t in r["hyp"])
        sys.stdout.write(f"{r['utt_id']}\t{toks}\t{r['score']:.6f}\n")
    return 0


def cmd_bench(args) -> int:
    kinds = [k.strip() for k in args.kinds.split(",") if k.strip()]
    lengths = [int(t) for t in args.lengths.split(",")]
    report = bench_scaling(kinds=kinds, lengths=lengths, d_att=args.d_att,
                           kernel=args.kernel, n_shared=args.n_shared,
                           n_samples=args.samples, seed=args.seed)
    w = _writer()
    for rec in report.to_records():
        w.write(rec)
    return 0


def _gradcheck_suite(seed: int):
    """(name, build_loss, params, threshold) for every layer family."""
    rng = np.random.default_rng(seed)

    def t(shape, scale=1.0):
        return T.Tensor(scale * rng.standard_normal(shape), requires_grad=True)

    out = []
    x = t((4, 8))
    mh = init_multi_head(8, 2, rng)
    out.append(("sa", lambda: T.tsum(self_attention(x, mh)), [x] + mh.params(), 1e-5))
    v = t((5, 4))
    w = t((2, 3))
    out.append(("lconv", lambda: T.tsum(lconv(v, w)), [v, w], 1e-5))
    v2, wp = t((5, 4)), t((6, 4), 0.5)
    out.append(("dconv", lambda: T.tsum(dconv(v2, wp, 2, 3)), [v2, wp], 1e-5))
    vf, wf = t((4, 5)), t((3,))
    out.append(("lconv_f", lambda: T.tsum(lconv_f(vf, wf)), [vf, wf], 1e-5))
    vd, wdp = t((4, 5)), t((3, 5), 0.5)
    out.append(("dconv_f", lambda: T.tsum(dconv_f(vd, wdp)), [vd, wdp], 1e-5))
    for kind in ("lconv2d", "dconv2d"):
        blk = init_conv_block(kind, 6, 2, 3, rng)
        xb = t((4, 6))
        out.append(
            (kind, lambda blk=blk, xb=xb: T.tsum(blk.forward(xb, causal=False)),
             [xb] + blk.params(), 1e-5)
        )
    xf, w1, b1, w2, b2 = t((3, 4)), t((4, 6)), t((6,)), t((6, 4)), t((4,))
    out.append(
        ("ff", lambda: T.tsum(T.affine(T.relu(T.affine(xf, w1, b1)), w2, b2)),
         [xf, w1, b1, w2, b2], 1e-5)
    )
    z = t((5, 4))
    out.append(("ctc", lambda: ctc_loss(T.log_softmax_rows(z), [0, 1]), [z], 1e-5))

    cfg = ModelConfig(vocab_size=3, feat_dim=2, n_enc=1, n_dec=1, d_att=8,
                      d_ff=16, n_heads=2, dropconnect=0.0, ctc_weight=0.5)
    model = build_model(cfg, seed=seed)
    feats = rng.standard_normal((5, 2))
    out.append(
        ("end_to_end",
         lambda: utterance_loss(model, feats, [0, 2])[0],
         model.param_list(), 1e-4)
    )
    return out


def cmd_gradcheck(args) -> int:
    w = _writer()
    worst_fail = 0
    for name, build_loss, params, threshold in _gradcheck_suite(args.seed):
        err = finite_difference_check(build_loss, params)
        ok = err < threshold
        w.write({"record": "gradcheck", "target": name, "rel_err": err,
                 "threshold": threshold, "pass": bool(ok)})
        worst_fail += 0 if ok else 1
    return 0 if worst_fail == 0 else 1


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def _add_model_args(p: argparse.ArgumentParser):
    p.add_argument("--preset", choices=sorted(PRESETS), default=None,
                   help="encoder/decoder combination")
    p.add_argument("--paper-scale", action="store_true",
                   help="published depth/width instead of desk scale")
    p.add_argument("--config", default=None, help="flat key = value file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ctc-weight", type=float, default=None, dest="ctc_weight")
    p.add_argument("--dropconnect", type=float, default=None)
    p.add_argument("--subsample-factor", type=int, default=None, dest="subsample_factor")
    p.add_argument("--label-smoothing", type=float, default=None, dest="label_smoothing")


def _add_decode_args(p: argparse.ArgumentParser):
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "dev", "test"))
    p.add_argument("--ckpt", default=None)
    p.add_argument("--beam", type=int, default=4)
    p.add_argument("--gamma", type=float, default=0.3,
                   help="CTC weight during decoding")
    p.add_argument("--no-length-norm", action="store_true")


def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="casq",
                                 description="sequence transduction experiments")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write synthetic dataset splits")
    g.add_argument("--task", choices=TASKS, default="copy")
    g.add_argument("--vocab-size", type=int, default=20)
    g.add_argument("--feat-dim", type=int, default=8)
    g.add_argument("--t-min", type=int, default=10)
    g.add_argument("--t-max", type=int, default=30)
    g.add_argument("--noise-std", type=float, default=0.0)
    g.add_argument("--n-train", type=int, default=2000)
    g.add_argument("--n-dev", type=int, default=200)
    g.add_argument("--n-test", type=int, default=200)
    g.add_argument("--frames-per-token", type=int, default=2)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model on a dataset directory")
    _add_model_args(t)
    t.add_argument("--data", required=True)
    t.add_argument("--save", default=None, help="checkpoint path")
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--batch-size", type=int, default=None)
    t.add_argument("--grad-accum", type=int, default=None)
    t.add_argument("--lr-schedule", choices=("noam", "fixed"), default=None)
    t.add_argument("--lr", type=float, default=None)
    t.add_argument("--lr-factor", type=float, default=None)
    t.add_argument("--warmup-steps", type=int, default=None)
    t.add_argument("--target-dev-ter", type=float, default=None)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="decode a split and report error rate")
    _add_model_args(e)
    _add_decode_args(e)
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("decode", help="emit utt_id<TAB>tokens<TAB>score lines")
    _add_model_args(d)
    _add_decode_args(d)
    d.set_defaults(func=cmd_decode)

    b = sub.add_parser("bench", help="scaling benchmark of core layers")
    b.add_argument("--kinds", default=",".join(BENCH_KINDS))
    b.add_argument("--lengths", default=",".join(str(t) for t in DEFAULT_LENGTHS))
    b.add_argument("--d-att", type=int, default=64)
    b.add_argument("--kernel", type=int, default=31)
    b.add_argument("--n-shared", type=int, default=4)
    b.add_argument("--samples", type=int, default=10)
    b.add_argument("--seed", type=int, default=0)
    b.set_defaults(func=cmd_bench)

    c = sub.add_parser("gradcheck", help="finite-difference checks per layer")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_gradcheck)
    return ap


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        return args.func(args)
    except CasqError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
