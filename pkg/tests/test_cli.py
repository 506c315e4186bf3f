"""CLI behavior: config files, presets, subcommands, output formats."""

import json
import re

import pytest

from casq.errors import ConfigError
from casq.harness.cli import (
    DESK_DIMS,
    PRESETS,
    build_model_config,
    main,
    parse_config_file,
    split_config_overrides,
)
from casq.harness.data import SyntheticTaskSpec, generate_dataset, save_split


def write_tiny_dataset(dirpath, vocab=5, seed=9):
    spec = SyntheticTaskSpec(task="copy", vocab_size=vocab, feat_dim=4, t_min=4,
                             t_max=8, n_train=12, n_dev=4, n_test=4, seed=seed)
    ds = generate_dataset(spec)
    for split, utts in ds.splits.items():
        save_split(str(dirpath / f"{split}.data"), utts, spec)
    return ds


MICRO_CONF = "n_enc = 1\nn_dec = 1\nd_att = 8\nd_ff = 16\nn_heads = 2\ndropconnect = 0.0\n"


class TestConfigFile:
    def test_parse_happy_path(self, tmp_path):
        p = tmp_path / "c.conf"
        p.write_text("alpha = 3\n\n# comment\nbeta = hi there # trailing\n")
        assert parse_config_file(str(p)) == {"alpha": "3", "beta": "hi there"}

    def test_missing_equals_rejected(self, tmp_path):
        p = tmp_path / "c.conf"
        p.write_text("this is not a pair\n")
        with pytest.raises(ConfigError, match="key = value"):
            parse_config_file(str(p))

    def test_duplicate_key_rejected(self, tmp_path):
        p = tmp_path / "c.conf"
        p.write_text("a = 1\na = 2\n")
        with pytest.raises(ConfigError, match="duplicate"):
            parse_config_file(str(p))

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown config key"):
            split_config_overrides({"decoder_kernel_frobnication": "9"})

    def test_keys_partition_and_coerce(self):
        model, tr = split_config_overrides(
            {"d_att": "32", "dropconnect": "0.2", "kernel_softmax": "true",
             "freq_kernel": "none", "epochs": "7", "lr_schedule": "fixed"}
        )
        assert model == {"d_att": 32, "dropconnect": 0.2, "kernel_softmax": True,
                         "freq_kernel": None}
        assert tr == {"epochs": 7, "lr_schedule": "fixed"}

    def test_bad_value_rejected(self):
        with pytest.raises(ConfigError, match="cannot parse"):
            split_config_overrides({"d_att": "wide"})


class _Args:
    """Bare attribute bag standing in for parsed argparse output."""

    def __init__(self, **kw):
        self.preset = None
        self.paper_scale = False
        self.config = None
        self.seed = 0
        self.ctc_weight = None
        self.dropconnect = None
        self.subsample_factor = None
        self.label_smoothing = None
        self.__dict__.update(kw)


EXPECTED_PRESETS = {
    # encoder kind, decoder kind, n_shared, kernel_enc, kernel_dec
    "sa": ("sa", "sa", None, None, None),
    "lc": ("lconv", "lconv", 4, 101, 71),
    "dc": ("dconv", "dconv", 4, 101, 71),
    "lc2d": ("lconv2d", "lconv2d", 16, 101, 71),
    "dc2d": ("dconv2d", "dconv2d", 2, 31, 11),
    "sa-lc": ("sa", "lconv", 8, None, 31),
    "sa-dc": ("sa", "dconv", 8, None, 31),
    "sa-lc2d": ("sa", "lconv2d", 4, None, 11),
    "sa-dc2d": ("sa", "dconv2d", 4, None, 11),
}


class TestPresets:
    @pytest.mark.parametrize("name", sorted(PRESETS))
    def test_preset_values(self, name):
        enc, dec, h, ke, kd = EXPECTED_PRESETS[name]
        cfg = build_model_config(_Args(preset=name), vocab_size=5, feat_dim=4,
                                 file_model={})
        assert cfg.encoder_type == enc and cfg.decoder_type == dec
        if h is not None:
            assert cfg.n_shared == h
        if ke is not None:
            assert cfg.kernel_enc == ke
        if kd is not None:
            assert cfg.kernel_dec == kd
        for k, v in DESK_DIMS.items():
            assert getattr(cfg, k) == v
        cfg.validate()

    def test_paper_scale_dims(self):
        cfg = build_model_config(_Args(preset="lc", paper_scale=True),
                                 vocab_size=5, feat_dim=4, file_model={})
        assert (cfg.n_enc, cfg.n_dec, cfg.d_att, cfg.d_ff) == (12, 6, 256, 2048)
        assert cfg.kernel_enc == 101  # kernels survive the rescale

    def test_precedence_file_over_preset_flag_over_file(self):
        cfg = build_model_config(_Args(preset="lc", ctc_weight=0.7),
                                 vocab_size=5, feat_dim=4,
                                 file_model={"kernel_enc": 7, "ctc_weight": 0.1})
        assert cfg.kernel_enc == 7        # file beats preset
        assert cfg.ctc_weight == 0.7      # explicit flag beats file

    def test_unknown_preset_exits_with_usage(self, tmp_path, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["train", "--data", str(tmp_path), "--preset", "frobnicate"])
        assert exc.value.code == 2
        assert "usage" in capsys.readouterr().err


class TestSubcommands:
    def test_gen_data_roundtrip(self, tmp_path, capsys):
        out = tmp_path / "ds"
        rc = main(["gen-data", "--task", "reverse", "--vocab-size", "5",
                   "--feat-dim", "4", "--t-min", "4", "--t-max", "8",
                   "--n-train", "6", "--n-dev", "2", "--n-test", "2",
                   "--seed", "3", "--out", str(out)])
        assert rc == 0
        recs = [json.loads(l) for l in capsys.readouterr().out.splitlines()]
        assert {r["split"] for r in recs} == {"train", "dev", "test"}
        from casq.harness.data import load_split

        utts, header = load_split(str(out / "train.data"))
        assert header["task"] == "reverse" and len(utts) == 6

    def test_train_eval_decode_flow(self, tmp_path, capsys):
        write_tiny_dataset(tmp_path)
        conf = tmp_path / "m.conf"
        conf.write_text(MICRO_CONF)
        ckpt = tmp_path / "m.ckpt"
        rc = main(["train", "--data", str(tmp_path), "--config", str(conf),
                   "--epochs", "1", "--batch-size", "6", "--seed", "0",
                   "--save", str(ckpt)])
        assert rc == 0
        lines = capsys.readouterr().out.splitlines()
        kinds = [json.loads(l).get("record", "epoch") for l in lines]
        assert kinds[0] == "config"
        assert "checkpoint" in kinds
        assert ckpt.exists()

        rc = main(["eval", "--data", str(tmp_path), "--split", "dev",
                   "--config", str(conf), "--ckpt", str(ckpt),
                   "--beam", "1", "--gamma", "0"])
        assert rc == 0
        out = capsys.readouterr().out.splitlines()
        summary = json.loads(out[-1])
        assert summary["record"] == "eval_summary"
        assert summary["n_utts"] == 4
        assert "seconds" in summary["timing"]

        rc = main(["decode", "--data", str(tmp_path), "--split", "dev",
                   "--config", str(conf), "--ckpt", str(ckpt),
                   "--beam", "1", "--gamma", "0"])
        assert rc == 0
        tsv = capsys.readouterr().out.splitlines()
        assert len(tsv) == 4
        pat = re.compile(r"^utt-\d{6}\t(\d+( \d+)*)?\t-?\d+\.\d{6}$")
        for line in tsv:
            assert pat.match(line), line

    def test_eval_without_data_fails_cleanly(self, tmp_path, capsys):
        rc = main(["eval", "--data", str(tmp_path), "--split", "test"])
        assert rc == 1
        assert "error:" in capsys.readouterr().err

    def test_eval_deterministic_minus_timing(self, tmp_path, capsys):
        write_tiny_dataset(tmp_path)
        conf = tmp_path / "m.conf"
        conf.write_text(MICRO_CONF)
        outs = []
        for _ in range(2):
            rc = main(["eval", "--data", str(tmp_path), "--split", "dev",
                       "--config", str(conf), "--beam", "2", "--gamma", "0.3",
                       "--seed", "4"])
            assert rc == 0
            recs = [json.loads(l) for l in capsys.readouterr().out.splitlines()]
            for r in recs:
                r.pop("timing", None)
            outs.append(recs)
        assert outs[0] == outs[1]

    def test_gradcheck_passes(self, tmp_path, capsys):
        rc = main(["gradcheck", "--seed", "1"])
        assert rc == 0
        recs = [json.loads(l) for l in capsys.readouterr().out.splitlines()]
        assert all(r["pass"] for r in recs)
        names = {r["target"] for r in recs}
        assert {"sa", "lconv", "dconv", "lconv2d", "dconv2d", "ff", "ctc",
                "end_to_end"} <= names

    def test_bench_tiny_grid(self, capsys):
        rc = main(["bench", "--kinds", "lconv", "--lengths", "8,16,32,64,128",
                   "--d-att", "8", "--kernel", "3", "--n-shared", "2",
                   "--samples", "10"])
        assert rc == 0
        recs = [json.loads(l) for l in capsys.readouterr().out.splitlines()]
        assert sum(r["record"] == "bench_point" for r in recs) == 5
        assert sum(r["record"] == "bench_slope" for r in recs) == 1

    def test_bad_bench_lengths_fail_cleanly(self, capsys):
        rc = main(["bench", "--lengths", "8,16"])
        assert rc == 1
        assert "error:" in capsys.readouterr().err
