"""Encoder-decoder sequence model with swappable self-attention cores.

The encoder runs on subsampled input frames; the decoder is label-
synchronous with teacher forcing. Either side's self-attention sublayer
can be a multi-head attention or one of the four convolution blocks; the
decoder's source attention is always multi-head attention. A linear CTC
head sits on top of the encoder output for joint training and decoding.

Residual wiring per block, z = z + core(z) then z = z + ff(z), follows
the usual pre-normalization scheme when ``use_layernorm`` is on; with it
off the stack is the bare residual composition, which is the form the
closed-form tests check.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attention import AttentionMask, MultiHeadParams, init_multi_head, multi_head, self_attention
from .convlayers import CONV_KINDS, ConvBlock, init_conv_block
from .errors import ConfigError, ContractError, DimensionError

LAYER_KINDS = ("sa",) + CONV_KINDS

CHECKPOINT_MAGIC = b"CASQ1"
META_PREFIX = "__meta__/"
CTC_BLANK_INDEX = 0
CTC_VOCAB_OFFSET = 1


def allowed_combo(encoder_type: str, decoder_type: str) -> bool:
    """Encoder/decoder pairings that are actually defined.

    Matched types always work, and a self-attention encoder accepts any
    convolutional decoder. A convolutional encoder feeding an attention
    decoder (or a mismatched conv pair) is not a defined model.
    """
    if encoder_type == decoder_type:
        return True
    return encoder_type == "sa" and decoder_type in CONV_KINDS


@dataclass
class ModelConfig:
    vocab_size: int
    feat_dim: int
    encoder_type: str = "sa"
    decoder_type: str = "sa"
    n_enc: int = 2
    n_dec: int = 2
    d_att: int = 64
    d_ff: int = 128
    n_heads: int = 4
    n_shared: int = 4
    kernel_enc: int = 7
    kernel_dec: int = 7
    freq_kernel: int | None = None
    subsample_factor: int = 1
    kernel_softmax: bool = False
    dropconnect: float = 0.1
    use_layernorm: bool = True
    embed_scale: bool = False
    ctc_weight: float = 0.3
    label_smoothing: float = 0.0

    def validate(self) -> None:
        if self.vocab_size < 1:
            raise ConfigError(f"vocab_size must be positive, got {self.vocab_size}")
        if self.feat_dim < 1:
            raise ConfigError(f"feat_dim must be positive, got {self.feat_dim}")
        if self.encoder_type not in LAYER_KINDS or self.decoder_type not in LAYER_KINDS:
            raise ConfigError(
                f"layer types must be one of {LAYER_KINDS}, got "
                f"{self.encoder_type!r}/{self.decoder_type!r}"
            )
        if not allowed_combo(self.encoder_type, self.decoder_type):
            raise ConfigError(
                f"a {self.encoder_type!r} encoder cannot drive a "
                f"{self.decoder_type!r} decoder; only matched pairs or a "
                "self-attention encoder with a convolutional decoder are defined"
            )
        if self.d_att % self.n_heads != 0:
            raise ConfigError(f"d_att {self.d_att} not divisible by {self.n_heads} heads")
        f = self.subsample_factor
        if f < 1 or (f & (f - 1)) != 0:
            raise ConfigError(f"subsample_factor must be a power of two, got {f}")
        if not 0.0 <= self.ctc_weight <= 1.0:
            raise ConfigError(f"ctc_weight must be in [0, 1], got {self.ctc_weight}")
        if not 0.0 <= self.dropconnect < 1.0:
            raise ConfigError(f"dropconnect must be in [0, 1), got {self.dropconnect}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError(f"label_smoothing must be in [0, 1), got {self.label_smoothing}")


def positional_encoding(n: int, d: int) -> np.ndarray:
    """Interleaved sine/cosine table: column 2j is sin(i / 10000^(2j/d)),
    column 2j+1 the cosine at the same frequency. Zero-based positions."""
    pos = np.arange(n, dtype=np.float64)[:, None]
    j2 = np.arange(0, d, 2, dtype=np.float64)
    ang = pos / np.power(10000.0, j2 / d)
    pe = np.zeros((n, d))
    pe[:, 0::2] = np.sin(ang)
    pe[:, 1::2] = np.cos(ang[:, : d // 2])
    return pe


def subsampled_length(t: int, factor: int) -> int:
    """Output length of the frontend: ceil(t / 2) per halving stage."""
    for _ in range(int(np.log2(factor))):
        t = (t + 1) // 2
    return t


@dataclass
class _FF:
    w1: T.Tensor
    b1: T.Tensor
    w2: T.Tensor
    b2: T.Tensor

    def forward(self, x: T.Tensor) -> T.Tensor:
        return T.affine(T.relu(T.affine(x, self.w1, self.b1)), self.w2, self.b2)

    def params(self) -> list[T.Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]


@dataclass
class _LN:
    gain: T.Tensor
    bias: T.Tensor

    def forward(self, x: T.Tensor) -> T.Tensor:
        return T.layer_norm_rows(x, self.gain, self.bias)

    def params(self) -> list[T.Tensor]:
        return [self.gain, self.bias]


@dataclass
class _Block:
    core: MultiHeadParams | ConvBlock
    ff: _FF
    cross: MultiHeadParams | None = None
    ln_core: _LN | None = None
    ln_cross: _LN | None = None
    ln_ff: _LN | None = None


class Model:
    """A built model: parameters plus forward passes over one utterance.

    There is no batch axis anywhere; batching is a training-loop concern
    (sum gradients over utterances, then divide).
    """

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        config.validate()
        self.config = config
        d = config.d_att
        self._params: dict[str, T.Tensor] = {}

        def reg(tensor: T.Tensor) -> T.Tensor:
            if tensor.name in self._params:
                raise ContractError(f"duplicate parameter name {tensor.name}")
            self._params[tensor.name] = tensor
            return tensor

        def weight(name, shape, scale):
            return reg(T.Tensor(rng.standard_normal(shape) * scale, True, name))

        def bias(name, n):
            return reg(T.Tensor(np.zeros(n), True, name))

        # Input frontend: either one projection or log2(factor) halving convs.
        self._sub_stages: list[list[T.Tensor]] = []
        if config.subsample_factor == 1:
            self._sub_proj = weight(
                "subsample/proj", (config.feat_dim, d), 1.0 / np.sqrt(config.feat_dim)
            )
        else:
            self._sub_proj = None
            in_dim = config.feat_dim
            for s in range(int(np.log2(config.subsample_factor))):
                taps = [
                    weight(f"subsample/{s}/w{k}", (in_dim, d), 1.0 / np.sqrt(3 * in_dim))
                    for k in range(3)
                ]
                self._sub_stages.append(taps)
                in_dim = d

        def make_core(kind, kernel, name):
            if kind == "sa":
                p = init_multi_head(d, config.n_heads, rng, name=name)
                for t in p.params():
                    reg(t)
                return p
            blk = init_conv_block(
                kind, d, config.n_shared, kernel, rng,
                kernel_softmax=config.kernel_softmax,
                dropconnect=config.dropconnect,
                freq_kernel=config.freq_kernel,
                name=name,
            )
            for t in blk.params():
                reg(t)
            return blk

        def make_ff(name):
            return _FF(
                weight(f"{name}/w1", (d, config.d_ff), 1.0 / np.sqrt(d)),
                bias(f"{name}/b1", config.d_ff),
                weight(f"{name}/w2", (config.d_ff, d), 1.0 / np.sqrt(config.d_ff)),
                bias(f"{name}/b2", d),
            )

        def make_ln(name):
            if not config.use_layernorm:
                return None
            return _LN(
                reg(T.Tensor(np.ones(d), True, f"{name}/gain")),
                bias(f"{name}/bias", d),
            )

        self.enc_blocks: list[_Block] = []
        for n in range(config.n_enc):
            self.enc_blocks.append(
                _Block(
                    core=make_core(config.encoder_type, config.kernel_enc, f"enc/{n}/core"),
                    ff=make_ff(f"enc/{n}/ff"),
                    ln_core=make_ln(f"enc/{n}/ln_core"),
                    ln_ff=make_ln(f"enc/{n}/ln_ff"),
                )
            )
        self.enc_ln_final = make_ln("enc/ln_final")

        self.dec_blocks: list[_Block] = []
        for m in range(config.n_dec):
            cross = init_multi_head(d, config.n_heads, rng, name=f"dec/{m}/cross")
            for t in cross.params():
                reg(t)
            self.dec_blocks.append(
                _Block(
                    core=make_core(config.decoder_type, config.kernel_dec, f"dec/{m}/core"),
                    ff=make_ff(f"dec/{m}/ff"),
                    cross=cross,
                    ln_core=make_ln(f"dec/{m}/ln_core"),
                    ln_cross=make_ln(f"dec/{m}/ln_cross"),
                    ln_ff=make_ln(f"dec/{m}/ln_ff"),
                )
            )
        self.dec_ln_final = make_ln("dec/ln_final")

        # Shared start/end symbol sits at id vocab_size.
        v_out = config.vocab_size + 1
        self.embed = weight("embed/table", (v_out, d), 1.0 / np.sqrt(d))
        self.w_final = weight("final/w", (d, v_out), 1.0 / np.sqrt(d))
        self.b_final = bias("final/b", v_out)
        # CTC head: blank at 0, token t at t+1; the start/end symbol never
        # appears on the CTC side.
        self.w_ctc = weight("ctc/w", (d, config.vocab_size + 1), 1.0 / np.sqrt(d))
        self.b_ctc = bias("ctc/b", config.vocab_size + 1)

    # -- parameter access ---------------------------------------------------

    def params(self) -> dict[str, T.Tensor]:
        return self._params

    def param_list(self) -> list[T.Tensor]:
        return list(self._params.values())

    def n_params(self, prefix: str = "") -> int:
        return sum(p.data.size for n, p in self._params.items() if n.startswith(prefix))

    @property
    def sos_id(self) -> int:
        return self.config.vocab_size

    @property
    def eos_id(self) -> int:
        return self.config.vocab_size

    # -- forward passes -----------------------------------------------------

    def _maybe_ln(self, ln: _LN | None, x: T.Tensor) -> T.Tensor:
        return ln.forward(x) if ln is not None else x

    def subsample(self, features: np.ndarray) -> T.Tensor:
        x = T.Tensor(np.asarray(features, dtype=np.float64))
        if x.ndim != 2 or x.shape[1] != self.config.feat_dim:
            raise DimensionError(
                f"features must be (frames, {self.config.feat_dim}), got {x.shape}"
            )
        if self._sub_proj is not None:
            return T.matmul(x, self._sub_proj)
        for taps in self._sub_stages:
            t_out = (x.shape[0] + 1) // 2
            padded = T.pad(x, rows=(1, 1))
            acc = None
            for k, w in enumerate(taps):
                part = T.matmul(
                    T.slice_rc(padded, rows=slice(k, 2 * t_out + k - 1, 2)), w
                )
                acc = part if acc is None else T.add(acc, part)
            x = T.relu(acc)
        return x

    def encode(
        self,
        features: np.ndarray,
        training: bool = False,
        rng: np.random.Generator | None = None,
    ) -> T.Tensor:
        """Features (frames x feat_dim) to encoder states (T_ss x d_att)."""
        x = self.subsample(features)
        pe = T.Tensor(positional_encoding(x.shape[0], self.config.d_att))
        z = T.add(x, pe)
        for blk in self.enc_blocks:
            a_in = self._maybe_ln(blk.ln_core, z)
            if isinstance(blk.core, MultiHeadParams):
                a = self_attention(a_in, blk.core)
            else:
                a = blk.core.forward(a_in, causal=False, training=training, rng=rng)
            z = T.add(z, a)
            f = blk.ff.forward(self._maybe_ln(blk.ln_ff, z))
            z = T.add(z, f)
        return self._maybe_ln(self.enc_ln_final, z)

    def _decoder_states(
        self,
        enc: T.Tensor,
        tokens_in: list[int],
        training: bool,
        rng: np.random.Generator | None,
    ) -> T.Tensor:
        n = len(tokens_in)
        emb = T.embed_lookup(tokens_in, self.embed)
        if self.config.embed_scale:
            emb = T.scale(emb, np.sqrt(self.config.d_att))
        y = T.add(emb, T.Tensor(positional_encoding(n, self.config.d_att)))
        causal = AttentionMask.causal(n)
        for blk in self.dec_blocks:
            a_in = self._maybe_ln(blk.ln_core, y)
            if isinstance(blk.core, MultiHeadParams):
                a = self_attention(a_in, blk.core, causal)
            else:
                a = blk.core.forward(a_in, causal=True, training=training, rng=rng)
            y = T.add(y, a)
            s_in = self._maybe_ln(blk.ln_cross, y)
            y = T.add(y, multi_head(s_in, enc, enc, blk.cross))
            f = blk.ff.forward(self._maybe_ln(blk.ln_ff, y))
            y = T.add(y, f)
        return self._maybe_ln(self.dec_ln_final, y)

    def att_logits(
        self,
        enc: T.Tensor,
        tokens_in: list[int],
        training: bool = False,
        rng: np.random.Generator | None = None,
    ) -> T.Tensor:
        """Teacher-forced decoder logits, one row per input token.

        ``tokens_in`` normally starts with the start symbol; row i scores
        the distribution of the token following tokens_in[:i+1].
        """
        if not tokens_in:
            raise ContractError("decoder needs at least the start symbol")
        y = self._decoder_states(enc, tokens_in, training, rng)
        return T.affine(y, self.w_final, self.b_final)

    def ctc_logits(self, enc: T.Tensor) -> T.Tensor:
        return T.affine(enc, self.w_ctc, self.b_ctc)


def build_model(config: ModelConfig, seed: int = 0) -> Model:
    return Model(config, np.random.default_rng(seed))


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------
# Layout: the 5-byte magic, then one record per tensor, sorted by name:
#   u32 LE name length, the utf-8 name, u32 LE rank, rank u64 LE extents,
#   then the float64 LE payload in row-major order.
# Decoding conventions ride along as __meta__/ rank-0 records.


def save_checkpoint(path: str, model: Model) -> None:
    records: dict[str, np.ndarray] = {n: p.data for n, p in model.params().items()}
    records[META_PREFIX + "ctc_blank_index"] = np.asarray(float(CTC_BLANK_INDEX))
    records[META_PREFIX + "ctc_vocab_offset"] = np.asarray(float(CTC_VOCAB_OFFSET))
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        for name in sorted(records):
            arr = np.asarray(records[name], dtype="<f8")
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(arr.tobytes(order="C"))


def read_checkpoint(path: str) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ContractError(f"{path} is not a checkpoint (bad magic)")
    off = len(CHECKPOINT_MAGIC)
    out: dict[str, np.ndarray] = {}
    while off < len(blob):
        (nlen,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off : off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<I", blob, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}Q", blob, off)
        off += 8 * rank
        count = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=off).reshape(shape)
        off += 8 * count
        out[name] = arr.astype(np.float64)
    return out


def load_checkpoint(path: str, model: Model) -> dict[str, float]:
    """Restore parameters in place; returns the __meta__ conventions."""
    records = read_checkpoint(path)
    meta = {
        k[len(META_PREFIX) :]: float(v)
        for k, v in records.items()
        if k.startswith(META_PREFIX)
    }
    stored = {k for k in records if not k.startswith(META_PREFIX)}
    wanted = set(model.params())
    if stored != wanted:
        missing = sorted(wanted - stored)[:3]
        extra = sorted(stored - wanted)[:3]
        raise ContractError(
            f"checkpoint does not match model: missing {missing}, unexpected {extra}"
        )
    for name, p in model.params().items():
        arr = records[name]
        if arr.shape != p.data.shape:
            raise ContractError(
                f"checkpoint shape {arr.shape} != model shape {p.data.shape} for {name}"
            )
        p.data = arr.copy()
        p.grad = None
    return meta


def kernel_audit(model: Model) -> list[dict]:
    """Per-block census of time-axis kernel entries.

    Every conv block carries n_shared * kernel distinct time-kernel
    entries: lightweight kinds as literal parameters, dynamic kinds as
    the rows their predictor emits per position. A depthwise kernel over
    the same d-dimensional values would need d * kernel. Both counts are
    returned so the weight-sharing reduction can be checked exactly.
    """
    rows = []
    d = model.config.d_att
    for side, blocks in (("enc", model.enc_blocks), ("dec", model.dec_blocks)):
        for i, blk in enumerate(blocks):
            core = blk.core
            if not isinstance(core, ConvBlock):
                continue
            h, k = core.n_shared, core.kernel
            if core.kind.startswith("lconv"):
                entries = int(core.w_time.data.size)
            else:
                entries = int(core.w_time.shape[0])
            rows.append(
                {
                    "name": f"{side}/{i}",
                    "kind": core.kind,
                    "n_shared": h,
                    "kernel": k,
                    "time_kernel_entries": entries,
                    "shared_expected": h * k,
                    "depthwise_entries": d * k,
                }
            )
    return rows
