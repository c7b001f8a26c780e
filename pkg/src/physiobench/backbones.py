"""Level-truncated 1D backbones with pluggable attention, plus the
parameter-count planning calculus used to pick each family's depth.

Families
--------
* ``vgg`` — plain conv stages (2–3 convs + max pool each, no norm layers),
  truncatable after any of its 5 stages; flattened dense head.
* ``resnet`` — 7-wide strided stem then 8 two-conv residual blocks with
  batch norm, downsampling at blocks 3/5/7; pooled dense head.
* ``inception`` — conv stem then up to 9 four-branch modules
  (1x1 / 1x1-3 / 1x1-5 / pool-1x1, concatenated; no norm layers, matching
  the original architecture), inter-module pools after modules 2 and 7;
  pooled dense head.
* ``msa_only`` — a stride-10 conv stem tokenizes the waveform (2000 samples
  -> 199 tokens) feeding a transformer encoder; pooled dense head.

A "module" is the attention attachment unit: a VGG stage, a residual
block, or an inception module.  Attention blocks are appended at module
outputs per :func:`attention_placement`.

All models take ``[B, 2, 2000]`` waveforms plus ``[B, 4]`` demographics
(fused after the first dense head layer) and emit a single output: a logit
for classification or a value for regression.

The planning side (:class:`LevelTable`, :func:`select_level`,
:func:`level_trend`) operates on externally supplied per-level counts; the
published counts used as planner inputs live in :data:`PUBLISHED_TABLES`.
"""

from __future__ import annotations

from dataclasses import dataclass
from types import MappingProxyType

import numpy as np

from .attention import AttentionKind, MsaConfig, MsaEncoder, make_attention
from .core import nn
from .core import tensor as T
from .core.tensor import Tensor

FAMILIES = ("vgg", "resnet", "inception", "msa_only")
CNN_FAMILIES = ("vgg", "resnet", "inception")
MAX_LEVEL = MappingProxyType({"vgg": 5, "resnet": 8, "inception": 8, "msa_only": 1})
DEFAULT_LEVEL = MappingProxyType({"vgg": 5, "resnet": 6, "inception": 4, "msa_only": 1})
FRACTIONS = (0, 50, 100)
TASKS = ("classification", "regression")

IN_CHANNELS = 2
SEGMENT_LEN = 2000
DEMOGRAPHICS_DIM = 4

# (out_channels, n_convs) per VGG stage; every conv k3/s1/same + relu,
# stage ends with max pool w2/s2.
VGG_STAGES = ((64, 2), (128, 2), (256, 3), (512, 3), (512, 3))
VGG_FC_WIDTH = 4096

# (out_channels, first_conv_stride) per residual block.
RESNET_BLOCKS = ((64, 1), (64, 1), (128, 2), (128, 1),
                 (256, 2), (256, 1), (512, 2), (512, 1))

# (b1, reduce3, out3, reduce5, out5, pool_proj) per inception module.
INCEPTION_MODULES = (
    (64, 96, 128, 16, 32, 32),
    (128, 128, 192, 32, 96, 64),
    (192, 96, 208, 16, 48, 64),
    (160, 112, 224, 24, 64, 64),
    (128, 128, 256, 24, 64, 64),
    (112, 144, 288, 32, 64, 64),
    (256, 160, 320, 32, 128, 128),
    (256, 160, 320, 32, 128, 128),
    (384, 192, 384, 48, 128, 128),
)
INCEPTION_STEM_OUT = 192
INCEPTION_POOL_AFTER = frozenset({2, 7})

GAP_FC_WIDTH = 1000  # head width for the globally pooled families


def module_channels(family: str, level: int) -> list[int]:
    """Output channel width of each attachable module, modules 1..level."""
    if family == "vgg":
        chans = [c for c, _ in VGG_STAGES]
    elif family == "resnet":
        chans = [c for c, _ in RESNET_BLOCKS]
    elif family == "inception":
        chans = []
        for b1, _, o3, _, o5, pp in INCEPTION_MODULES:
            chans.append(b1 + o3 + o5 + pp)
    else:
        raise ValueError(f"no CNN modules for family {family!r}")
    if not 1 <= level <= len(chans):
        raise ValueError(f"level {level} out of range 1..{len(chans)} for {family}")
    return chans[:level]


def attention_placement(n_modules: int, fraction: int) -> frozenset[int]:
    """1-based module indices that receive an attention block.

    fraction 0 -> none; 50 -> every second module (even indices); 100 -> all.
    """
    if n_modules < 1:
        raise ValueError(f"n_modules must be >= 1, got {n_modules}")
    if fraction == 0:
        return frozenset()
    if fraction == 50:
        return frozenset(range(2, n_modules + 1, 2))
    if fraction == 100:
        return frozenset(range(1, n_modules + 1))
    raise ValueError(f"fraction must be one of {FRACTIONS}, got {fraction}")


@dataclass(frozen=True)
class ModelConfig:
    """Everything needed to build one benchmark model."""

    family: str
    level: int
    attention: AttentionKind = AttentionKind.NONE
    fraction: int = 0
    msa: MsaConfig | None = None
    task: str = "classification"
    demographics_dim: int = DEMOGRAPHICS_DIM
    in_channels: int = IN_CHANNELS
    length: int = SEGMENT_LEN
    se_ratio: int = 16
    cbam_ratio: int = 16
    cbam_kernel: int = 7
    msa_stem_kernel: int = 20
    msa_stem_stride: int = 10
    msa_positional: bool = True

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; expected one of {TASKS}")
        object.__setattr__(self, "attention", AttentionKind(self.attention))
        if self.fraction not in FRACTIONS:
            raise ValueError(f"fraction must be one of {FRACTIONS}, got {self.fraction}")
        if not 1 <= self.level <= MAX_LEVEL[self.family]:
            raise ValueError(
                f"level {self.level} out of range 1..{MAX_LEVEL[self.family]} for {self.family}")
        if (self.attention == AttentionKind.MSA) != (self.family == "msa_only"):
            raise ValueError("attention 'msa' and family 'msa_only' imply each other")
        if self.family == "msa_only":
            if self.msa is None:
                raise ValueError("family 'msa_only' requires an MsaConfig")
            if self.fraction != 0:
                raise ValueError("fraction does not apply to msa_only; use 0")
        if self.attention == AttentionKind.NONE and self.fraction != 0:
            raise ValueError("attention 'none' requires fraction 0")


# ---------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------

class Identity(nn.Module):
    def forward(self, x: Tensor) -> Tensor:
        return x


class VggStage(nn.Module):
    def __init__(self, rng, in_ch: int, out_ch: int, n_convs: int):
        super().__init__()
        convs = []
        c = in_ch
        for _ in range(n_convs):
            convs.append(nn.Conv1d(rng, c, out_ch, 3))
            c = out_ch
        self.convs = nn.ModuleList(convs)

    def forward(self, x: Tensor) -> Tensor:
        for conv in self.convs:
            x = T.relu(conv(x))
        return T.pool1d(x, "max", 2, 2)


class ResNetStem(nn.Module):
    def __init__(self, rng, in_ch: int):
        super().__init__()
        self.conv = nn.Conv1d(rng, in_ch, 64, 7, stride=2)
        self.bn = nn.BatchNorm1d(64)

    def forward(self, x: Tensor) -> Tensor:
        x = T.relu(self.bn(self.conv(x)))
        return T.pool1d(x, "max", 3, 2, padding="same")


class ResNetBlock(nn.Module):
    def __init__(self, rng, in_ch: int, out_ch: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv1d(rng, in_ch, out_ch, 3, stride=stride)
        self.bn1 = nn.BatchNorm1d(out_ch)
        self.conv2 = nn.Conv1d(rng, out_ch, out_ch, 3)
        self.bn2 = nn.BatchNorm1d(out_ch)
        if stride != 1 or in_ch != out_ch:
            self.down_conv = nn.Conv1d(rng, in_ch, out_ch, 1, stride=stride)
            self.down_bn = nn.BatchNorm1d(out_ch)
        else:
            self.down_conv = None
            self.down_bn = None

    def forward(self, x: Tensor) -> Tensor:
        out = T.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        skip = x if self.down_conv is None else self.down_bn(self.down_conv(x))
        return T.relu(out + skip)


class InceptionStem(nn.Module):
    def __init__(self, rng, in_ch: int):
        super().__init__()
        self.conv1 = nn.Conv1d(rng, in_ch, 64, 7, stride=2)
        self.conv2 = nn.Conv1d(rng, 64, INCEPTION_STEM_OUT, 3)

    def forward(self, x: Tensor) -> Tensor:
        x = T.relu(self.conv1(x))
        x = T.pool1d(x, "max", 3, 2, padding="same")
        x = T.relu(self.conv2(x))
        return T.pool1d(x, "max", 3, 2, padding="same")


class InceptionModule(nn.Module):
    def __init__(self, rng, in_ch: int, spec: tuple[int, ...]):
        super().__init__()
        b1, r3, o3, r5, o5, pp = spec
        self.conv_b1 = nn.Conv1d(rng, in_ch, b1, 1)
        self.conv_r3 = nn.Conv1d(rng, in_ch, r3, 1)
        self.conv_o3 = nn.Conv1d(rng, r3, o3, 3)
        self.conv_r5 = nn.Conv1d(rng, in_ch, r5, 1)
        self.conv_o5 = nn.Conv1d(rng, r5, o5, 5)
        self.conv_pp = nn.Conv1d(rng, in_ch, pp, 1)

    def forward(self, x: Tensor) -> Tensor:
        b1 = T.relu(self.conv_b1(x))
        b3 = T.relu(self.conv_o3(T.relu(self.conv_r3(x))))
        b5 = T.relu(self.conv_o5(T.relu(self.conv_r5(x))))
        bp = T.relu(self.conv_pp(T.pool1d(x, "max", 3, 1, padding="same")))
        return T.concat([b1, b3, b5, bp], axis=1)


def vgg_out_length(level: int, length: int = SEGMENT_LEN) -> int:
    out = length
    for _ in range(level):
        out //= 2
    return out


# ---------------------------------------------------------------------
# the assembled model
# ---------------------------------------------------------------------

class BuiltModel(nn.Module):
    """Backbone + attention + demographics-fused head, per a ModelConfig."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.attention_indices: frozenset[int] = frozenset()
        if cfg.family == "msa_only":
            self._build_msa(cfg, rng)
        else:
            self._build_cnn(cfg, rng)
        self._dtype = self.parameters()[0].data.dtype

    # -- construction ---------------------------------------------------
    def _build_cnn(self, cfg: ModelConfig, rng) -> None:
        blocks: list[nn.Module] = []
        if cfg.family == "vgg":
            self.stem = None
            c = cfg.in_channels
            for out_ch, n_convs in VGG_STAGES[:cfg.level]:
                blocks.append(VggStage(rng, c, out_ch, n_convs))
                c = out_ch
        elif cfg.family == "resnet":
            self.stem = ResNetStem(rng, cfg.in_channels)
            c = 64
            for out_ch, stride in RESNET_BLOCKS[:cfg.level]:
                blocks.append(ResNetBlock(rng, c, out_ch, stride))
                c = out_ch
        else:  # inception
            self.stem = InceptionStem(rng, cfg.in_channels)
            c = INCEPTION_STEM_OUT
            for spec in INCEPTION_MODULES[:cfg.level]:
                blocks.append(InceptionModule(rng, c, spec))
                c = spec[0] + spec[2] + spec[4] + spec[5]
        self.blocks = nn.ModuleList(blocks)

        chans = module_channels(cfg.family, cfg.level)
        self.attention_indices = attention_placement(cfg.level, cfg.fraction)
        attn: list[nn.Module] = []
        for i, ch in enumerate(chans, start=1):
            if i in self.attention_indices:
                attn.append(make_attention(rng, cfg.attention, ch,
                                           se_ratio=cfg.se_ratio,
                                           cbam_ratio=cfg.cbam_ratio,
                                           cbam_kernel=cfg.cbam_kernel))
            else:
                attn.append(Identity())
        self.attn = nn.ModuleList(attn)

        if cfg.family == "vgg":
            flat = chans[-1] * vgg_out_length(cfg.level, cfg.length)
            self.head_fc1 = nn.Dense(rng, flat, VGG_FC_WIDTH, init="kaiming")
            self.head_fc2 = nn.Dense(rng, VGG_FC_WIDTH + cfg.demographics_dim,
                                     VGG_FC_WIDTH, init="kaiming")
            self.head_out = nn.Dense(rng, VGG_FC_WIDTH, 1)
        else:
            self.head_fc1 = nn.Dense(rng, chans[-1], GAP_FC_WIDTH, init="kaiming")
            self.head_fc2 = None
            self.head_out = nn.Dense(rng, GAP_FC_WIDTH + cfg.demographics_dim, 1)

    def _build_msa(self, cfg: ModelConfig, rng) -> None:
        d = cfg.msa.d_model
        self.stem = nn.Conv1d(rng, cfg.in_channels, d, cfg.msa_stem_kernel,
                              stride=cfg.msa_stem_stride, padding="valid",
                              init="xavier")
        self.encoder = MsaEncoder(rng, cfg.msa, positional=cfg.msa_positional)
        self.blocks = nn.ModuleList([])
        self.attn = nn.ModuleList([])
        self.head_fc1 = nn.Dense(rng, d, d, init="kaiming")
        self.head_fc2 = None
        self.head_out = nn.Dense(rng, d + cfg.demographics_dim, 1)

    # -- execution --------------------------------------------------------
    def _as_input(self, value, name: str, want_ndim: int) -> Tensor:
        t = value if isinstance(value, Tensor) else Tensor(value, dtype=self._dtype)
        if t.ndim != want_ndim:
            raise T.ShapeError(f"{name} must be {want_ndim}D, got shape {t.shape}")
        return t

    def forward(self, x, demographics) -> Tensor:
        x = self._as_input(x, "waveforms", 3)
        demo = self._as_input(demographics, "demographics", 2)
        if self.cfg.family == "msa_only":
            tokens = T.transpose(self.stem(x), 0, 2, 1)
            tokens = self.encoder(tokens)
            h = T.reduce_mean(tokens, axis=1)
        else:
            h = self.stem(x) if self.stem is not None else x
            for i, (block, att) in enumerate(zip(self.blocks, self.attn), start=1):
                h = att(block(h))
                if (self.cfg.family == "inception"
                        and i in INCEPTION_POOL_AFTER and i < self.cfg.level):
                    h = T.pool1d(h, "max", 3, 2, padding="same")
            if self.cfg.family == "vgg":
                B = h.shape[0]
                h = h.reshape(B, h.shape[1] * h.shape[2])
            else:
                h = T.global_pool(h, "avg")
        h = T.relu(self.head_fc1(h))
        h = T.concat([h, demo], axis=1)
        if self.head_fc2 is not None:
            h = T.relu(self.head_fc2(h))
        return self.head_out(h)

    # -- accounting -------------------------------------------------------
    def feature_params(self) -> int:
        """Trainable parameters outside the dense head (stem/blocks/attention)."""
        head = ("head_fc1/", "head_fc2/", "head_out/")
        return sum(p.size for name, p in self.named_parameters()
                   if p.requires_grad and not name.startswith(head))


def build_model(cfg: ModelConfig, rng=0) -> BuiltModel:
    """Materialize a config; ``rng`` is a seed or a numpy Generator."""
    return BuiltModel(cfg, np.random.default_rng(rng))


def count_params(model: nn.Module) -> int:
    """Trainable parameter total (batchnorm running buffers are not parameters)."""
    return sum(p.size for p in model.parameters() if p.requires_grad)


# ---------------------------------------------------------------------
# closed-form parameter accounting (no arrays materialized)
# ---------------------------------------------------------------------

def _conv_p(cin: int, cout: int, k: int) -> int:
    return cout * cin * k + cout


def _dense_p(n: int, m: int) -> int:
    return n * m + m


def _bn_p(c: int) -> int:
    return 2 * c


def attention_param_count(kind: AttentionKind, channels: int, se_ratio: int = 16,
                          cbam_ratio: int = 16, cbam_kernel: int = 7) -> int:
    kind = AttentionKind(kind)
    if kind == AttentionKind.SE:
        mid = channels // se_ratio
        return _dense_p(channels, mid) + _dense_p(mid, channels)
    if kind == AttentionKind.NL:
        embed = channels // 2
        return 3 * _conv_p(channels, embed, 1) + _conv_p(embed, channels, 1)
    if kind == AttentionKind.CBAM:
        mid = channels // cbam_ratio
        return (_dense_p(channels, mid) + _dense_p(mid, channels)
                + _conv_p(2, 1, cbam_kernel))
    raise ValueError(f"no feature-map parameter count for kind {kind.value!r}")


def msa_layer_param_count(d_model: int, d_ff: int) -> int:
    return (4 * _dense_p(d_model, d_model) + 2 * (2 * d_model)
            + _dense_p(d_model, d_ff) + _dense_p(d_ff, d_model))


def feature_param_count(family: str, level: int, in_channels: int = IN_CHANNELS) -> int:
    """Backbone-only (attention-free, headless) trainable parameter count."""
    total = 0
    if family == "vgg":
        c = in_channels
        for out_ch, n_convs in VGG_STAGES[:level]:
            for _ in range(n_convs):
                total += _conv_p(c, out_ch, 3)
                c = out_ch
    elif family == "resnet":
        total += _conv_p(in_channels, 64, 7) + _bn_p(64)
        c = 64
        for out_ch, stride in RESNET_BLOCKS[:level]:
            total += _conv_p(c, out_ch, 3) + _bn_p(out_ch)
            total += _conv_p(out_ch, out_ch, 3) + _bn_p(out_ch)
            if stride != 1 or c != out_ch:
                total += _conv_p(c, out_ch, 1) + _bn_p(out_ch)
            c = out_ch
    elif family == "inception":
        total += _conv_p(in_channels, 64, 7) + _conv_p(64, INCEPTION_STEM_OUT, 3)
        c = INCEPTION_STEM_OUT
        for b1, r3, o3, r5, o5, pp in INCEPTION_MODULES[:level]:
            total += (_conv_p(c, b1, 1) + _conv_p(c, r3, 1) + _conv_p(r3, o3, 3)
                      + _conv_p(c, r5, 1) + _conv_p(r5, o5, 5) + _conv_p(c, pp, 1))
            c = b1 + o3 + o5 + pp
    else:
        raise ValueError(f"no feature count for family {family!r}")
    return total


def model_param_count(cfg: ModelConfig) -> int:
    """Closed-form trainable parameter total for a full config."""
    if cfg.family == "msa_only":
        d = cfg.msa.d_model
        return (_conv_p(cfg.in_channels, d, cfg.msa_stem_kernel)
                + cfg.msa.n_layers * msa_layer_param_count(d, cfg.msa.d_ff)
                + _dense_p(d, d) + _dense_p(d + cfg.demographics_dim, 1))
    total = feature_param_count(cfg.family, cfg.level, cfg.in_channels)
    chans = module_channels(cfg.family, cfg.level)
    for i in attention_placement(cfg.level, cfg.fraction):
        total += attention_param_count(cfg.attention, chans[i - 1],
                                       cfg.se_ratio, cfg.cbam_ratio, cfg.cbam_kernel)
    if cfg.family == "vgg":
        flat = chans[-1] * vgg_out_length(cfg.level, cfg.length)
        total += (_dense_p(flat, VGG_FC_WIDTH)
                  + _dense_p(VGG_FC_WIDTH + cfg.demographics_dim, VGG_FC_WIDTH)
                  + _dense_p(VGG_FC_WIDTH, 1))
    else:
        total += (_dense_p(chans[-1], GAP_FC_WIDTH)
                  + _dense_p(GAP_FC_WIDTH + cfg.demographics_dim, 1))
    return total


# ---------------------------------------------------------------------
# level planning
# ---------------------------------------------------------------------

@dataclass(frozen=True)
class LevelTable:
    """Per-level trainable-parameter counts plus the full-model reference."""

    family: str
    counts: tuple[tuple[int, int], ...]  # (level, count), ascending level
    default_count: int

    def __post_init__(self):
        if not self.counts:
            raise ValueError("level table needs at least one level")
        levels = [lvl for lvl, _ in self.counts]
        if levels != sorted(set(levels)):
            raise ValueError("levels must be unique and ascending")

    @property
    def threshold(self) -> float:
        """Planning cutoff: one fifth of the full model's parameter count."""
        return self.default_count / 5


def select_level(table: LevelTable) -> int:
    """Smallest level count still at or above default/5; ties pick the
    shallower level."""
    eligible = [(count, level) for level, count in table.counts
                if count >= table.threshold]
    if not eligible:
        biggest = max(count for _, count in table.counts)
        raise ValueError(
            f"no {table.family} level reaches threshold {table.threshold:.1f}; "
            f"largest available count is {biggest}")
    return min(eligible)[1]


def level_trend(table: LevelTable) -> str:
    """'increasing' / 'decreasing' when strictly monotone in level, else 'mixed'."""
    counts = [count for _, count in table.counts]
    if len(counts) < 2:
        raise ValueError("trend needs at least two levels")
    if all(a < b for a, b in zip(counts, counts[1:])):
        return "increasing"
    if all(a > b for a, b in zip(counts, counts[1:])):
        return "decreasing"
    return "mixed"


def _table(family: str, counts: dict[int, int], default: int) -> LevelTable:
    return LevelTable(family, tuple(sorted(counts.items())), default)


# Published per-level counts used as planner inputs (not produced by this
# package's own counter; head reconstructions differ — see README).
PUBLISHED_TABLES = MappingProxyType({
    "vgg": _table("vgg", {
        1: 192_128_065, 2: 189_891_329, 3: 130_614_785,
        4: 90_639_361, 5: 40_567_296,
    }, 40_567_296),
    "resnet": _table("resnet", {
        1: 26_048, 2: 51_008, 3: 134_080, 4: 233_152,
        5: 563_136, 6: 957_888, 7: 2_273_216, 8: 3_849_152,
    }, 3_849_152),
    "inception": _table("inception", {
        1: 117_744, 2: 297_584, 3: 538_592, 4: 806_504,
        5: 1_089_280, 6: 1_404_864, 7: 1_884_096, 8: 2_538_432,
    }, 3_417_264),
})


def computed_level_table(family: str, attention: AttentionKind = AttentionKind.NONE,
                         fraction: int = 0) -> LevelTable:
    """Level table from this package's own models (closed-form counts)."""
    if family not in CNN_FAMILIES:
        raise ValueError(f"level tables exist for CNN families only, got {family!r}")
    counts = {}
    for level in range(1, MAX_LEVEL[family] + 1):
        cfg = ModelConfig(family=family, level=level, attention=attention,
                          fraction=fraction)
        counts[level] = model_param_count(cfg)
    default = counts[MAX_LEVEL[family]]
    return _table(family, counts, default)
