"""Stacked-autoencoder block classifier: assembly, loss, training, checkpoints.

Each stage is an hourglass: an encoder that downsamples the block to a
quarter of its resolution per side and a mirrored decoder that brings it
back, with identity skip connections across the middle convolution pair
of each half.  Every stage emits a per-pixel prediction through a 1x1
convolution and a sigmoid; later stages see the original block plus a
1x1 projection of the previous stage's prediction.  Supervision applies
a class-weighted BCE per stage, with weights rising stage by stage.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .distmat import AnnotationMatrix, DistanceMatrix, SamplerConfig, sample_training_subblocks
from .errors import ConfigError, FormatError, NumericError, ShapeError
from .ops import AdamState, BatchNorm2d, Conv2d, MaxPool2, ReLU, Sigmoid, Upsample, adam_step, wbce_loss

RANW_MAGIC = b"RANW"
RANW_VERSION = 1


def default_stage_weights(stages: int) -> tuple[float, ...]:
    """Class weights per stage, small first then larger."""
    if stages == 1:
        return (0.5,)
    if stages == 2:
        return (0.3, 0.7)
    if stages == 3:
        return (0.3, 0.5, 0.7)
    return tuple(np.linspace(0.3, 0.7, stages))


@dataclass
class NetConfig:
    stages: int = 3
    first_filter: int = 5
    channels: int = 16
    skip_connections: bool = True
    intermediate_supervision: bool = True
    stage_weights: tuple[float, ...] | None = None
    canonical: int = 140

    def __post_init__(self):
        if self.stage_weights is None:
            self.stage_weights = default_stage_weights(self.stages)
        self.stage_weights = tuple(float(w) for w in self.stage_weights)

    def validate(self) -> None:
        if self.stages < 1:
            raise ConfigError("need at least one stage")
        if self.first_filter % 2 == 0 or self.first_filter < 1:
            raise ConfigError(f"first_filter must be odd, got {self.first_filter}")
        if self.channels < 1:
            raise ConfigError("channels must be >= 1")
        if self.canonical < 4 or self.canonical % 4:
            raise ConfigError(
                f"canonical size must be a positive multiple of 4, got {self.canonical}"
            )
        if len(self.stage_weights) != self.stages:
            raise ConfigError(
                f"{len(self.stage_weights)} stage weights for {self.stages} stages"
            )
        for w in self.stage_weights:
            if not 0.0 < w < 1.0:
                raise ConfigError(f"stage weight {w} outside (0, 1)")


class Stage:
    """One hourglass: 4-conv encoder, mirrored 4-conv decoder, 1x1 head."""

    def __init__(self, cfg: NetConfig, rng: np.random.Generator, with_projection: bool, dtype=np.float32):
        c = cfg.channels
        self.skip = cfg.skip_connections
        self.proj = Conv2d(1, c, 1, rng=rng, dtype=dtype) if with_projection else None
        self.conv1 = Conv2d(1, c, cfg.first_filter, rng=rng, dtype=dtype)
        self.bn1 = BatchNorm2d(c, dtype=dtype)
        self.conv2 = Conv2d(c, c, 3, rng=rng, dtype=dtype)
        self.bn2 = BatchNorm2d(c, dtype=dtype)
        self.pool1 = MaxPool2()
        self.conv3 = Conv2d(c, c, 3, rng=rng, dtype=dtype)
        self.bn3 = BatchNorm2d(c, dtype=dtype)
        self.conv4 = Conv2d(c, c, 3, rng=rng, dtype=dtype)
        self.bn4 = BatchNorm2d(c, dtype=dtype)
        self.pool2 = MaxPool2()
        self.up1 = Upsample(2)
        self.dconv1 = Conv2d(c, c, 3, rng=rng, dtype=dtype)
        self.dbn1 = BatchNorm2d(c, dtype=dtype)
        self.dconv2 = Conv2d(c, c, 3, rng=rng, dtype=dtype)
        self.dbn2 = BatchNorm2d(c, dtype=dtype)
        self.up2 = Upsample(2)
        self.dconv3 = Conv2d(c, c, 3, rng=rng, dtype=dtype)
        self.dbn3 = BatchNorm2d(c, dtype=dtype)
        self.dconv4 = Conv2d(c, c, 3, rng=rng, dtype=dtype)
        self.dbn4 = BatchNorm2d(c, dtype=dtype)
        self.head = Conv2d(c, 1, 1, rng=rng, dtype=dtype)
        self.sig = Sigmoid()
        self.relus = {name: ReLU() for name in
                      ("r1", "r2", "r3", "r4", "d1", "d2", "d3", "d4")}
        self.bottleneck_shape: tuple | None = None

    def _conv_layers(self) -> list[tuple[str, Conv2d]]:
        named = []
        if self.proj is not None:
            named.append(("proj", self.proj))
        named += [
            ("conv1", self.conv1), ("conv2", self.conv2),
            ("conv3", self.conv3), ("conv4", self.conv4),
            ("dconv1", self.dconv1), ("dconv2", self.dconv2),
            ("dconv3", self.dconv3), ("dconv4", self.dconv4),
            ("head", self.head),
        ]
        return named

    def _bn_layers(self) -> list[tuple[str, BatchNorm2d]]:
        return [
            ("bn1", self.bn1), ("bn2", self.bn2), ("bn3", self.bn3), ("bn4", self.bn4),
            ("dbn1", self.dbn1), ("dbn2", self.dbn2), ("dbn3", self.dbn3), ("dbn4", self.dbn4),
        ]

    def forward(self, x: np.ndarray, prev_pred: np.ndarray | None, train: bool) -> np.ndarray:
        r = self.relus
        a = self.conv1.forward(x)
        if self.proj is not None:
            a = a + self.proj.forward(prev_pred)
        h = self.bn1.forward(r["r1"].forward(a), train)
        h = self.bn2.forward(r["r2"].forward(self.conv2.forward(h)), train)
        p1 = self.pool1.forward(h)
        e = self.bn3.forward(r["r3"].forward(self.conv3.forward(p1)), train)
        e = self.bn4.forward(r["r4"].forward(self.conv4.forward(e)), train)
        if self.skip:
            e = e + p1
        z = self.pool2.forward(e)
        self.bottleneck_shape = z.shape
        u = self.up1.forward(z)
        d = self.dbn1.forward(r["d1"].forward(self.dconv1.forward(u)), train)
        d = self.dbn2.forward(r["d2"].forward(self.dconv2.forward(d)), train)
        if self.skip:
            d = d + u
        u2 = self.up2.forward(d)
        g = self.dbn3.forward(r["d3"].forward(self.dconv3.forward(u2)), train)
        g = self.dbn4.forward(r["d4"].forward(self.dconv4.forward(g)), train)
        logits = self.head.forward(g)
        return self.sig.forward(logits)

    def backward(self, dlogits: np.ndarray) -> tuple[None, np.ndarray | None]:
        """Backprop from head logits; returns (None, d_prev_pred)."""
        r = self.relus
        dg = self.head.backward(dlogits)
        dg = self.dconv4.backward(r["d4"].backward(self.dbn4.backward(dg)))
        du2 = self.dconv3.backward(r["d3"].backward(self.dbn3.backward(dg)))
        dd = self.up2.backward(du2)
        du_skip = dd if self.skip else 0.0
        dd = self.dconv2.backward(r["d2"].backward(self.dbn2.backward(dd)))
        du = self.dconv1.backward(r["d1"].backward(self.dbn1.backward(dd)))
        dz = self.up1.backward(du + du_skip if self.skip else du)
        de = self.pool2.backward(dz)
        dp_skip = de if self.skip else 0.0
        de2 = self.conv4.backward(r["r4"].backward(self.bn4.backward(de)))
        dp1 = self.conv3.backward(r["r3"].backward(self.bn3.backward(de2)))
        dh = self.pool1.backward(dp1 + dp_skip if self.skip else dp1)
        dh = self.conv2.backward(r["r2"].backward(self.bn2.backward(dh)))
        da = r["r1"].backward(self.bn1.backward(dh))
        dprev = self.proj.backward(da) if self.proj is not None else None
        # the stage input is the raw data block, so its gradient is never used
        self.conv1.backward(da, need_dx=False)
        return None, dprev


class Model:
    """All learnable tensors of the stacked classifier plus optimizer state."""

    def __init__(self, cfg: NetConfig, seed: int = 0, dtype=np.float32):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.stages = [Stage(cfg, rng, with_projection=(k > 0), dtype=dtype) for k in range(cfg.stages)]
        self.adam = AdamState()

    def forward(self, x: np.ndarray, train: bool = False) -> list[np.ndarray]:
        """Per-stage prediction blocks, first stage to last."""
        if x.ndim != 4 or x.shape[1] != 1:
            raise ShapeError(f"expected (B, 1, H, W) input, got {x.shape}")
        if x.shape[2] != self.cfg.canonical or x.shape[3] != self.cfg.canonical:
            raise ShapeError(
                f"input spatial size {x.shape[2]}x{x.shape[3]} != canonical "
                f"{self.cfg.canonical}"
            )
        preds = []
        prev = None
        for stage in self.stages:
            prev = stage.forward(x, prev, train)
            preds.append(prev)
        return preds

    def backward(self, dlogits_per_stage: list[np.ndarray | None]) -> None:
        dpred_next: np.ndarray | None = None
        for k in range(len(self.stages) - 1, -1, -1):
            stage = self.stages[k]
            dl = dlogits_per_stage[k]
            if dpred_next is not None:
                extra = stage.sig.backward(dpred_next)
                dl = extra if dl is None else dl + extra
            if dl is None:
                raise NumericError(f"stage {k} received no gradient")
            _, dpred_next = stage.backward(dl)

    def _named(self, which: str) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for k, stage in enumerate(self.stages):
            if which != "buffers":
                for lname, layer in stage._conv_layers():
                    src = layer.params() if which == "params" else layer.grads()
                    for pname, arr in src.items():
                        out[f"stage{k}.{lname}.{pname}"] = arr
            for lname, layer in stage._bn_layers():
                if which == "buffers":
                    src = layer.buffers()
                else:
                    src = layer.params() if which == "params" else layer.grads()
                for pname, arr in src.items():
                    out[f"stage{k}.{lname}.{pname}"] = arr
        return out

    def named_params(self) -> dict[str, np.ndarray]:
        return self._named("params")

    def named_grads(self) -> dict[str, np.ndarray]:
        return self._named("grads")

    def named_buffers(self) -> dict[str, np.ndarray]:
        return self._named("buffers")

    def set_param(self, name: str, value: np.ndarray) -> None:
        stage_name, lname, pname = name.split(".")
        stage = self.stages[int(stage_name.removeprefix("stage"))]
        layer = dict(stage._conv_layers() + stage._bn_layers())[lname]
        target = getattr(layer, _ATTR_FOR[pname])
        if target.shape != value.shape:
            raise ShapeError(f"{name}: shape {value.shape} != {target.shape}")
        setattr(layer, _ATTR_FOR[pname], value.astype(target.dtype))


_ATTR_FOR = {
    "w": "w", "b": "b", "gamma": "gamma", "beta": "beta",
    "running_mean": "running_mean", "running_var": "running_var",
}


def build_model(cfg: NetConfig, seed: int = 0) -> Model:
    return Model(cfg, seed)


def staged_loss(stage_preds: list[np.ndarray], target: np.ndarray, cfg: NetConfig) -> float:
    """Multi-stage supervision: same target at every stage, rising weights."""
    total, _ = staged_loss_with_grads(stage_preds, target, cfg)
    return total


def staged_loss_with_grads(
    stage_preds: list[np.ndarray], target: np.ndarray, cfg: NetConfig
) -> tuple[float, list[np.ndarray | None]]:
    if len(stage_preds) != cfg.stages:
        raise ShapeError(f"{len(stage_preds)} predictions for {cfg.stages} stages")
    for p in stage_preds:
        if p.shape != target.shape:
            raise ShapeError(f"prediction {p.shape} vs target {target.shape}")
    dlogits: list[np.ndarray | None] = [None] * cfg.stages
    if cfg.intermediate_supervision:
        total = 0.0
        for k, pred in enumerate(stage_preds):
            loss, dl = wbce_loss(pred, target, cfg.stage_weights[k])
            total += loss
            dlogits[k] = dl
        return total, dlogits
    loss, dl = wbce_loss(stage_preds[-1], target, cfg.stage_weights[-1])
    dlogits[-1] = dl
    return loss, dlogits


def final_stage_wbce(stage_preds: list[np.ndarray], target: np.ndarray, cfg: NetConfig) -> float:
    loss, _ = wbce_loss(stage_preds[-1], target, cfg.stage_weights[-1])
    return loss


@dataclass
class TrainConfig:
    epochs: int = 3
    lr: float = 0.002
    batch_size: int = 8
    sampler: SamplerConfig = field(default_factory=SamplerConfig)

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")
        self.sampler.validate()


@dataclass
class TrainResult:
    epoch_losses: list[float]
    step_losses: list[float]


def train(
    model: Model,
    dataset: list[tuple[DistanceMatrix, AnnotationMatrix]],
    tcfg: TrainConfig,
    seed: int = 0,
) -> TrainResult:
    """Mini-batch Adam training with per-epoch sub-block resampling.

    Sub-blocks are redrawn each epoch with fresh random sizes, which is
    what realizes temporal-scale augmentation.  Fully deterministic for
    a given seed.
    """
    tcfg.validate()
    if not dataset:
        raise ConfigError("training dataset is empty")
    if tcfg.sampler.canonical != model.cfg.canonical:
        raise ConfigError(
            f"sampler canonical {tcfg.sampler.canonical} != model canonical "
            f"{model.cfg.canonical}"
        )
    rng = np.random.default_rng(seed)
    model.adam.lr = tcfg.lr
    epoch_losses: list[float] = []
    step_losses: list[float] = []
    for epoch in range(tcfg.epochs):
        xs, ys = [], []
        for m, a in dataset:
            for blk in sample_training_subblocks(m, a, tcfg.sampler, rng):
                xs.append(blk.resized_input)
                ys.append(blk.resized_target)
        x = np.stack(xs)[:, None, :, :]
        y = np.stack(ys)[:, None, :, :]
        order = rng.permutation(len(xs))
        epoch_steps = []
        for lo in range(0, len(order), tcfg.batch_size):
            idx = order[lo : lo + tcfg.batch_size]
            preds = model.forward(x[idx], train=True)
            total, dlogits = staged_loss_with_grads(preds, y[idx], model.cfg)
            if not np.isfinite(total):
                raise NumericError(
                    f"non-finite loss {total} at epoch {epoch} step {len(step_losses)}"
                )
            model.backward(dlogits)
            adam_step(model.named_params(), model.named_grads(), model.adam)
            epoch_steps.append(total)
            step_losses.append(total)
        epoch_losses.append(float(np.mean(epoch_steps)))
    return TrainResult(epoch_losses, step_losses)


def train_fixed_blocks(
    model: Model,
    inputs: np.ndarray,
    targets: np.ndarray,
    steps: int,
    lr: float = 0.002,
    stop_below: float | None = None,
) -> dict[str, list[float]]:
    """Full-batch Adam on a fixed block set; used by the overfit check.

    Returns per-step traces of the staged total and the final-stage term.
    Stops early once the final-stage term drops below stop_below.
    """
    model.adam.lr = lr
    totals: list[float] = []
    finals: list[float] = []
    for _ in range(steps):
        preds = model.forward(inputs, train=True)
        total, dlogits = staged_loss_with_grads(preds, targets, model.cfg)
        if not np.isfinite(total):
            raise NumericError(f"non-finite loss {total} at step {len(totals)}")
        model.backward(dlogits)
        adam_step(model.named_params(), model.named_grads(), model.adam)
        totals.append(total)
        finals.append(final_stage_wbce(preds, targets, model.cfg))
        if stop_below is not None and finals[-1] < stop_below:
            break
    return {"total": totals, "final_stage": finals}


# ---------------------------------------------------------------------------
# checkpoints


def _tensor_entries(model: Model) -> list[tuple[str, np.ndarray]]:
    entries = list(model.named_params().items())
    entries += list(model.named_buffers().items())
    return entries


def save_model(model: Model, path) -> None:
    """Write a checkpoint: magic, version, config JSON, tensors in order."""
    cfg_blob = json.dumps(dataclasses.asdict(model.cfg), sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(RANW_MAGIC)
        fh.write(struct.pack("<I", RANW_VERSION))
        fh.write(struct.pack("<I", len(cfg_blob)))
        fh.write(cfg_blob)
        entries = _tensor_entries(model)
        fh.write(struct.pack("<I", len(entries)))
        for _, arr in entries:
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_model(path) -> Model:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != RANW_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic {raw[:4]!r}")
    off = 4
    (version,) = struct.unpack_from("<I", raw, off)
    off += 4
    if version != RANW_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack_from("<I", raw, off)
    off += 4
    try:
        cfg_dict = json.loads(raw[off : off + cfg_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt config block: {exc}") from None
    off += cfg_len
    cfg_dict["stage_weights"] = tuple(cfg_dict["stage_weights"])
    cfg = NetConfig(**cfg_dict)
    model = Model(cfg, seed=0)
    entries = _tensor_entries(model)
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    if count != len(entries):
        raise FormatError(
            f"{path}: checkpoint has {count} tensors, model needs {len(entries)}"
        )
    for name, _ in entries:
        (ndim,) = struct.unpack_from("<I", raw, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        if off + 4 * size > len(raw):
            raise FormatError(f"{path}: truncated tensor data for {name}")
        arr = np.frombuffer(raw, dtype="<f4", count=size, offset=off).reshape(shape)
        off += 4 * size
        model.set_param(name, np.ascontiguousarray(arr, dtype=np.float32))
    if off != len(raw):
        raise FormatError(f"{path}: {len(raw) - off} trailing bytes")
    return model
