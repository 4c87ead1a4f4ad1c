"""The artifact-reduction filter network and its weight-file format.

The forward graph maps compressed attributes on a sparse geometry to an
N x H matrix R of per-point sample-offset candidates:

    embed     3^3 conv, input_channels -> C
    DSE       f_in + U3(U2(U1(f_in))), each U = 3^3 conv -> ReLU -> IRB
    HFE       f_in - upsample(avg_pool(f_in)), parameter-free
    LFE       autoencoder: per level [conv, stride-2 conv, ReLU, IRB] down,
              [conv, transposed conv, ReLU, IRB] back up the cached geometry
    FDE       unit(concat(LFE, HFE)): 3^3 conv 2C -> C, ReLU, IRB
    fusion    y = 3^3 conv(concat(FDE, DSE)); y + IRB(ReLU(y))
    head      3^3 conv C -> H, linear

Per-component variants share the graph but differ in input width: the Y
model sees [Y_hat], the U model [Y_hat, U_hat], and the V model
[Y_hat, U_hat, V_hat], all in the normalized [0, 1] attribute scale.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np

from . import layers, sparse

COMPONENTS = ("Y", "U", "V")
COMPONENT_TAG = {"Y": 0, "U": 1, "V": 2}
TAG_COMPONENT = {v: k for k, v in COMPONENT_TAG.items()}
# cross-component cascade: each model is conditioned on the compressed
# channels up to and including its own
INPUT_CHANNELS = {"Y": 1, "U": 2, "V": 3}

WEIGHTS_MAGIC = b"CARW"
WEIGHTS_VERSION = 1
_OPT_MARKER = b"OPTS"


@dataclass(frozen=True)
class ModelConfig:
    component: str = "Y"
    channels: int = 64
    kernel_size: int = 3
    head: int = 3
    lfe_levels: int = 3

    def __post_init__(self):
        if self.component not in COMPONENTS:
            raise ValueError(f"unknown component {self.component!r}")
        if self.head < 1:
            raise ValueError("head width must be >= 1")
        if self.channels % 4:
            raise ValueError("channel count must be divisible by 4")

    @property
    def input_channels(self) -> int:
        return INPUT_CHANNELS[self.component]


def profile_config(profile: str, component: str) -> ModelConfig:
    """Named configurations: full scale and the small desk profile."""
    if profile == "full":
        return ModelConfig(component, channels=64, head=3, lfe_levels=3)
    if profile == "desk":
        return ModelConfig(component, channels=16, head=3, lfe_levels=2)
    raise ValueError(f"unknown profile {profile!r}")


class GeometryPlan:
    """Cached per-level coordinates and kernel maps for one geometry.

    Level 0 is the input lattice; each deeper level halves it.  kmap3[l] is
    the stride-1 3^3 map at level l, kdown[l] the stride-2 map from level l
    to l+1 (also used, transposed, by the matching upsampler).
    """

    def __init__(self, coords: np.ndarray, levels: int, kernel_size: int = 3):
        coords = np.asarray(coords, dtype=np.int64)
        if len(coords) == 0:
            raise ValueError("empty geometry")
        self.kernel_size = kernel_size
        self.kmap3 = []
        self.kdown = []
        self.level_coords = []
        current = sparse.SparseTensor(coords, np.zeros((len(coords), 0)), 1)
        for level in range(levels + 1):
            self.level_coords.append(current.coords)
            self.kmap3.append(sparse.build_kernel_map(current, kernel_size, 1))
            if level < levels:
                down = sparse.build_kernel_map(current, kernel_size, 2)
                if down.n_out == 0:
                    raise ValueError("geometry too small for the configured depth")
                self.kdown.append(down)
                current = sparse.SparseTensor(
                    down.out_coords, np.zeros((down.n_out, 0)), down.out_stride
                )

    @property
    def coords(self) -> np.ndarray:
        return self.level_coords[0]


def assemble_component_input(coords, yuv, component: str) -> sparse.SparseTensor:
    """Stack the compressed channels a component's model is conditioned on.

    yuv is the compressed frame's N x 3 attribute block in [0, 255]; the
    result holds the first input_channels columns scaled to [0, 1].
    """
    yuv = np.asarray(yuv, dtype=np.float64)
    if yuv.ndim != 2 or yuv.shape[1] != 3:
        raise ValueError("expected an N x 3 YUV attribute block")
    width = INPUT_CHANNELS[component]
    return sparse.SparseTensor.from_points(coords, yuv[:, :width] / 255.0)


class FilterModel:
    """Sample-offset candidate network for one attribute component."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        C = cfg.channels
        k = cfg.kernel_size
        self.embed = layers.Conv("embed", cfg.input_channels, C, k)
        self.dse_units = [
            (
                layers.Conv(f"dse{i}.conv", C, C, k),
                layers.InceptionResidualBlock(f"dse{i}.irb", C),
            )
            for i in range(1, 4)
        ]
        self.enc = [
            (
                layers.Conv(f"lfe.enc{l}.pre", C, C, k),
                layers.Conv(f"lfe.enc{l}.down", C, C, k, stride=2),
                layers.InceptionResidualBlock(f"lfe.enc{l}.irb", C),
            )
            for l in range(cfg.lfe_levels)
        ]
        self.dec = [
            (
                layers.Conv(f"lfe.dec{l}.pre", C, C, k),
                layers.Conv(f"lfe.dec{l}.up", C, C, k, transposed=True),
                layers.InceptionResidualBlock(f"lfe.dec{l}.irb", C),
            )
            for l in range(cfg.lfe_levels)
        ]
        self.fde_conv = layers.Conv("fde.conv", 2 * C, C, k)
        self.fde_irb = layers.InceptionResidualBlock("fde.irb", C)
        self.fuse_conv = layers.Conv("fuse.conv", 2 * C, C, k)
        self.fuse_irb = layers.InceptionResidualBlock("fuse.irb", C)
        self.head = layers.Conv("head", C, cfg.head, k)

    def _convs(self):
        for conv, irb in self.dse_units:
            yield conv
            yield from irb.convs()
        for pre, down, irb in self.enc:
            yield pre
            yield down
            yield from irb.convs()
        for pre, up, irb in self.dec:
            yield pre
            yield up
            yield from irb.convs()
        yield self.embed
        yield self.fde_conv
        yield from self.fde_irb.convs()
        yield self.fuse_conv
        yield from self.fuse_irb.convs()
        yield self.head

    def param_shapes(self) -> dict[str, tuple]:
        shapes = {}
        for conv in self._convs():
            shapes.update(conv.param_shapes())
        return shapes

    def init_params(self, rng, head_scale: float = 1.0) -> dict[str, np.ndarray]:
        params = {}
        for conv in self._convs():
            scale = head_scale if conv is self.head else 1.0
            conv.init(rng, params, scale)
        return params

    def plan(self, coords) -> GeometryPlan:
        return GeometryPlan(coords, self.cfg.lfe_levels, self.cfg.kernel_size)

    def forward(self, params, attrs, plan, tape=None) -> sparse.SparseTensor:
        """Offset candidates R (N x H) on the input coordinates."""
        if attrs.num_channels != self.cfg.input_channels:
            raise ValueError(
                f"{self.cfg.component} model expects width "
                f"{self.cfg.input_channels}, got {attrs.num_channels}"
            )
        k0 = plan.kmap3[0]
        f_in = self.embed.apply(params, tape, attrs, k0)

        x = f_in
        for conv, irb in self.dse_units:
            x = conv.apply(params, tape, x, k0)
            x = irb.apply(params, tape, layers.relu(tape, x), k0)
        f_dse = layers.add(tape, f_in, x)

        pooled = layers.avg_pool(tape, f_in)
        f_up = layers.upsample(tape, pooled, plan.coords)
        f_hfe = layers.sub(tape, f_in, f_up)

        x = f_in
        for l, (pre, down, irb) in enumerate(self.enc):
            x = pre.apply(params, tape, x, plan.kmap3[l])
            x = down.apply(params, tape, x, plan.kdown[l])
            x = irb.apply(params, tape, layers.relu(tape, x), plan.kmap3[l + 1])
        for l in reversed(range(len(self.dec))):
            pre, up, irb = self.dec[l]
            x = pre.apply(params, tape, x, plan.kmap3[l + 1])
            x = up.apply(params, tape, x, plan.kdown[l])
            x = irb.apply(params, tape, layers.relu(tape, x), plan.kmap3[l])
        f_lfe = x

        y = self.fde_conv.apply(params, tape, layers.concat(tape, [f_lfe, f_hfe]), k0)
        f_fde = self.fde_irb.apply(params, tape, layers.relu(tape, y), k0)

        y = self.fuse_conv.apply(params, tape, layers.concat(tape, [f_fde, f_dse]), k0)
        fused = layers.add(tape, y, self.fuse_irb.apply(params, tape, layers.relu(tape, y), k0))
        return self.head.apply(params, tape, fused, k0)


def _write_array(f, name: str, value: np.ndarray):
    data = np.asarray(value, dtype="<f4")
    encoded = name.encode("utf-8")
    f.write(struct.pack("<H", len(encoded)))
    f.write(encoded)
    f.write(struct.pack("<B", data.ndim))
    for dim in data.shape:
        f.write(struct.pack("<I", dim))
    f.write(data.tobytes(order="C"))


def _read_exact(f, n: int) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise ValueError("truncated weight file")
    return data


def _read_array(f) -> tuple[str, np.ndarray] | None:
    head = f.read(2)
    if not head:
        return None
    if len(head) != 2:
        raise ValueError("truncated weight file")
    (name_len,) = struct.unpack("<H", head)
    name = _read_exact(f, name_len).decode("utf-8")
    (rank,) = struct.unpack("<B", _read_exact(f, 1))
    shape = tuple(
        struct.unpack("<I", _read_exact(f, 4))[0] for _ in range(rank)
    )
    count = int(np.prod(shape)) if rank else 1
    raw = _read_exact(f, 4 * count)
    value = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(shape)
    return name, value


def save_weights(path, cfg: ModelConfig, params: dict, opt_state: dict | None = None):
    """Write the weight file; appending optimizer state makes a checkpoint."""
    with open(path, "wb") as f:
        f.write(WEIGHTS_MAGIC)
        f.write(struct.pack("<B", WEIGHTS_VERSION))
        f.write(
            struct.pack(
                "<HBBBB",
                cfg.channels,
                cfg.kernel_size,
                cfg.head,
                cfg.input_channels,
                COMPONENT_TAG[cfg.component],
            )
        )
        for name in sorted(params):
            _write_array(f, name, params[name])
        if opt_state is not None:
            f.write(_OPT_MARKER)
            _write_array(f, "t", np.float64(opt_state["t"]))
            for name in sorted(opt_state["m"]):
                _write_array(f, f"m.{name}", opt_state["m"][name])
            for name in sorted(opt_state["v"]):
                _write_array(f, f"v.{name}", opt_state["v"][name])


def infer_lfe_levels(params) -> int:
    levels = {
        int(name.split(".")[1][3:])
        for name in params
        if name.startswith("lfe.enc") and name.endswith(".down.weight")
    }
    return max(levels) + 1 if levels else 0


def load_weights(path):
    """Read a weight file -> (config, params, optimizer state or None)."""
    with open(path, "rb") as f:
        if f.read(4) != WEIGHTS_MAGIC:
            raise ValueError("not a model weight file (bad magic)")
        (version,) = struct.unpack("<B", _read_exact(f, 1))
        if version != WEIGHTS_VERSION:
            raise ValueError(f"unsupported weight file version {version}")
        channels, kernel_size, head, input_channels, tag = struct.unpack(
            "<HBBBB", _read_exact(f, 6)
        )
        if tag not in TAG_COMPONENT:
            raise ValueError(f"unknown component tag {tag}")
        component = TAG_COMPONENT[tag]
        if INPUT_CHANNELS[component] != input_channels:
            raise ValueError("input channel count inconsistent with component")
        params = {}
        opt_state = None
        while True:
            pos = f.tell()
            marker = f.read(4)
            if not marker:
                break
            if marker == _OPT_MARKER:
                opt_state = _read_opt_state(f)
                break
            f.seek(pos)
            item = _read_array(f)
            if item is None:
                break
            name, value = item
            if not np.all(np.isfinite(value)):
                raise ValueError(f"non-finite values in parameter {name!r}")
            params[name] = value
    cfg = ModelConfig(
        component=component,
        channels=channels,
        kernel_size=kernel_size,
        head=head,
        lfe_levels=infer_lfe_levels(params),
    )
    return cfg, params, opt_state


def _read_opt_state(f) -> dict:
    state = {"t": 0, "m": {}, "v": {}}
    while True:
        item = _read_array(f)
        if item is None:
            break
        name, value = item
        if name == "t":
            state["t"] = int(value)
        elif name.startswith("m."):
            state["m"][name[2:]] = value
        elif name.startswith("v."):
            state["v"][name[2:]] = value
        else:
            raise ValueError(f"unexpected record {name!r} in optimizer section")
    return state


def build_model(cfg: ModelConfig) -> FilterModel:
    return FilterModel(cfg)


def check_params(model: FilterModel, params: dict):
    """Validate a loaded parameter table against the model's shape chart."""
    shapes = model.param_shapes()
    missing = sorted(set(shapes) - set(params))
    if missing:
        raise ValueError(f"missing parameters: {missing[:3]}{'...' if len(missing) > 3 else ''}")
    for name, shape in shapes.items():
        if tuple(params[name].shape) != shape:
            raise ValueError(
                f"parameter {name!r} has shape {params[name].shape}, want {shape}"
            )
