"""The VDN networks at desk scale, plus checkpoint serialisation.

Parameter groups:

    E_c  content encoder  x -> Q(z_c|x)
    E_d  style encoder    x -> z_d (globally pooled over pixels)
    E_t  task head        z_c -> class logits
    G    generator        (z_c, z_d) -> x_hat in [-1, 1]
    D_x  image critic     one score per source domain
    D_c  dual critic      (z_c, domain one-hot) -> T < 0
    E_p  frozen perceptual map (never trained)
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import configio
from .autodiff import Tensor, as_tensor
from .distributions import DiagGaussian
from .errors import ContractError, VdnError
from .fdiv import DualCritic
from .nn import MLP, Linear, Module, one_hot

GENERATOR_GROUPS = ("E_c", "E_d", "E_t", "G")
CRITIC_GROUPS = ("D_x", "D_c")
ALL_GROUPS = GENERATOR_GROUPS + CRITIC_GROUPS + ("E_p",)


@dataclass
class ModelConfig:
    input_dim: int = 432
    image_shape: tuple[int, ...] | None = (12, 12, 3)
    zc_dim: int = 8
    zd_dim: int = 4
    hidden: int = 64
    style_hidden: int = 16
    critic_hidden: int = 64
    perceptual_dim: int = 256
    perceptual: str = "random"  # "random" | "identity"
    n_classes: int = 4
    n_domains: int = 3
    reparameterize: bool = False
    toy_mode: bool = False
    toy_critic_hidden: int = 16
    init_seed: int = 0

    def __post_init__(self):
        if self.toy_mode:
            # fixed XOR topology: (3,3) -> (3,2) -> (2,1)
            self.input_dim, self.zc_dim = 3, 2
            self.image_shape = None
            self.n_classes, self.n_domains = 2, 1
            self.reparameterize = True
        if self.image_shape is not None:
            self.image_shape = tuple(int(s) for s in self.image_shape)
            if int(np.prod(self.image_shape)) != self.input_dim:
                raise ContractError(
                    f"image_shape {self.image_shape} does not flatten to input_dim {self.input_dim}"
                )
        for name in ("input_dim", "zc_dim", "zd_dim", "hidden", "style_hidden",
                     "critic_hidden", "perceptual_dim", "n_classes", "n_domains"):
            if getattr(self, name) <= 0:
                raise ContractError(f"{name} must be positive")
        if self.perceptual not in ("random", "identity"):
            raise ContractError(f"unknown perceptual map {self.perceptual!r}")


# -- networks ---------------------------------------------------------------------

class ContentEncoder(Module):
    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        self.reparameterize = cfg.reparameterize
        if cfg.toy_mode:
            self.body = self.add_child("body", MLP([3, 3], rng))
            h = 3
        else:
            self.body = self.add_child("body", MLP([cfg.input_dim, cfg.hidden, cfg.hidden], rng))
            h = cfg.hidden
        self.mu_head = self.add_child("mu", Linear(h, cfg.zc_dim, rng))
        if self.reparameterize:
            self.lv_head = self.add_child("log_var", Linear(h, cfg.zc_dim, rng))

    def __call__(self, x) -> DiagGaussian:
        h = ad.relu(self.body(x))
        mu = self.mu_head(h)
        if self.reparameterize:
            return DiagGaussian(mu, self.lv_head(h))
        return DiagGaussian(mu, np.zeros(mu.shape))


class StyleEncoder(Module):
    """Per-pixel features averaged over the image, so z_d has no spatial layout."""

    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        self.image_shape = cfg.image_shape
        if cfg.image_shape is not None:
            c = cfg.image_shape[-1]
            self.pixel = self.add_child("pixel", MLP([c, cfg.style_hidden, cfg.style_hidden], rng))
            self.out = self.add_child("out", Linear(cfg.style_hidden, cfg.zd_dim, rng))
        else:
            self.net = self.add_child("net", MLP([cfg.input_dim, cfg.hidden, cfg.zd_dim], rng))

    def __call__(self, x) -> Tensor:
        x = as_tensor(x)
        if self.image_shape is None:
            return self.net(x)
        n = x.shape[0]
        c = self.image_shape[-1]
        pixels = int(np.prod(self.image_shape[:-1]))
        feats = ad.relu(self.pixel(ad.reshape(x, (n * pixels, c))))
        pooled = ad.mean(ad.reshape(feats, (n, pixels, -1)), axis=1)
        return self.out(pooled)


class Generator(Module):
    """Single-channel content map from z_c, coloured per channel by a gain/shift from z_d.

    A desk-scale stand-in for AdaIN: z_d only sets per-channel statistics, so it
    cannot carry spatial (category) information into the output.
    """

    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        self.cfg = cfg
        if cfg.image_shape is None:
            self.body = self.add_child(
                "body", MLP([cfg.zc_dim + cfg.zd_dim, cfg.hidden, cfg.input_dim], rng)
            )
            return
        c = cfg.image_shape[-1]
        self.body = self.add_child("body", MLP([cfg.zc_dim, cfg.hidden, cfg.input_dim // c], rng))
        self.gain = self.add_child("gain", Linear(cfg.zd_dim, c, rng))
        self.shift = self.add_child("shift", Linear(cfg.zd_dim, c, rng))

    def __call__(self, zc, zd) -> Tensor:
        zc, zd = as_tensor(zc), as_tensor(zd)
        if zc.shape[0] != zd.shape[0] or zc.shape[1] != self.cfg.zc_dim or zd.shape[1] != self.cfg.zd_dim:
            raise ContractError(f"generator inputs {zc.shape}, {zd.shape} do not match config")
        if self.cfg.image_shape is None:
            return ad.tanh(self.body(ad.concat([zc, zd], axis=1)))
        n = zc.shape[0]
        c = self.cfg.image_shape[-1]
        pixels = self.cfg.input_dim // c
        content = ad.broadcast_to(ad.reshape(self.body(zc), (n, pixels, 1)), (n, pixels, c))
        gain = ad.broadcast_to(ad.reshape(self.gain(zd) + 1.0, (n, 1, c)), (n, pixels, c))
        shift = ad.broadcast_to(ad.reshape(self.shift(zd), (n, 1, c)), (n, pixels, c))
        return ad.reshape(ad.tanh(content * gain + shift), (n, self.cfg.input_dim))


class ImageCritic(Module):
    """One output head per source domain; the head of the claimed domain is read."""

    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        self.n_domains = cfg.n_domains
        self.net = self.add_child(
            "net", MLP([cfg.input_dim, cfg.hidden, cfg.n_domains], rng, activation="leaky_relu")
        )

    def __call__(self, x, domains) -> Tensor:
        domains = np.asarray(domains)
        if domains.ndim != 1 or domains.shape[0] != as_tensor(x).shape[0]:
            raise ContractError("D_x needs one domain label per example")
        heads = self.net(x)
        return ad.sum_(heads * one_hot(domains, self.n_domains), axis=1)


class PerceptualMap(Module):
    """Fixed random two-layer feature map; parameters never require grad."""

    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        self.identity = cfg.perceptual == "identity"
        if not self.identity:
            self.net = self.add_child(
                "net", MLP([cfg.input_dim, cfg.perceptual_dim, cfg.perceptual_dim], rng, activation="tanh")
            )
            # unit-variance weights keep feature magnitudes comparable to pixels,
            # so lambda_rec means the same thing as with the identity map
            for _, p in self.net.named_parameters():
                p.data = p.data * np.sqrt(3.0)
        self.set_trainable(False)

    def set_trainable(self, flag: bool) -> None:
        super().set_trainable(False)

    def __call__(self, x) -> Tensor:
        x = as_tensor(x)
        return x if self.identity else self.net(x)


class ToyTaskHead(Module):
    """Linear (2,1) scorer exposed as two logits [0, s] so softmax-CE equals BCE."""

    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        self.fc = self.add_child("fc", Linear(cfg.zc_dim, 1, rng))

    def __call__(self, z) -> Tensor:
        s = self.fc(z)
        return ad.concat([Tensor(np.zeros(s.shape)), s], axis=1)


class VdnModel(Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(config.init_seed)
        self.E_c = self.add_child("E_c", ContentEncoder(config, rng))
        if config.toy_mode:
            self.E_t = self.add_child("E_t", ToyTaskHead(config, rng))
            self.E_d = self.G = self.D_x = self.E_p = None
            self.D_c = self.add_child(
                "D_c", DualCritic(config.zc_dim, config.n_domains, config.toy_critic_hidden, rng)
            )
            return
        self.E_d = self.add_child("E_d", StyleEncoder(config, rng))
        self.E_t = self.add_child("E_t", MLP([config.zc_dim, config.hidden, config.n_classes], rng))
        self.G = self.add_child("G", Generator(config, rng))
        self.D_x = self.add_child("D_x", ImageCritic(config, rng))
        self.D_c = self.add_child(
            "D_c", DualCritic(config.zc_dim, config.n_domains, config.critic_hidden, rng)
        )
        self.E_p = self.add_child("E_p", PerceptualMap(config, np.random.default_rng(config.init_seed + 7919)))

    def group(self, name: str) -> Module | None:
        return self._children.get(name)

    def _params_of(self, name: str) -> list[Tensor]:
        # the parameter set is fixed at construction; cached because phases flip every step
        cache = self.__dict__.setdefault("_group_cache", {})
        if name not in cache:
            mod = self.group(name)
            cache[name] = [] if mod is None else mod.parameters()
        return cache[name]

    def group_parameters(self, names) -> list[Tensor]:
        return [p for name in names for p in self._params_of(name)]

    def set_phase(self, phase: str) -> None:
        """Make only the groups of ``phase`` ('generator' | 'critic' | 'none') trainable."""
        active = {"generator": GENERATOR_GROUPS, "critic": CRITIC_GROUPS, "none": ()}[phase]
        for name in GENERATOR_GROUPS + CRITIC_GROUPS:
            flag = name in active
            for p in self._params_of(name):
                p.requires_grad = flag
                if not flag:
                    p.grad = None


# -- operations -----------------------------------------------------------------------

def _check_input(model: VdnModel, x) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 2 or x.shape[1] != model.config.input_dim:
        raise ContractError(f"input shape {x.shape} does not match input_dim {model.config.input_dim}")
    return x


def encode(model: VdnModel, x) -> tuple[DiagGaussian, Tensor | None]:
    x = _check_input(model, x)
    q = model.E_c(x)
    zd = model.E_d(x) if model.E_d is not None else None
    return q, zd


def generate(model: VdnModel, zc, zd) -> Tensor:
    if model.G is None:
        raise ContractError("toy models have no generator")
    return model.G(zc, zd)


def predict_logits(model: VdnModel, x) -> np.ndarray:
    """Test-time path: E_t applied to the mean of Q(z_c|x).  Touches only E_c and E_t."""
    x = _check_input(model, x)
    with ad.no_grad():
        return model.E_t(model.E_c(x).mu).data


def predict(model: VdnModel, x) -> np.ndarray:
    return np.argmax(predict_logits(model, x), axis=1)


# -- checkpoints ----------------------------------------------------------------------

MANIFEST = "manifest.txt"
BLOB = "params.bin"
CHECKPOINT_FORMAT = "vdn-checkpoint"
CHECKPOINT_VERSION = 1


class CheckpointError(VdnError):
    pass


class CorruptManifestError(CheckpointError):
    pass


class ConfigMismatchError(CheckpointError):
    pass


class TruncatedBlobError(CheckpointError):
    pass


def checkpoint_save(model: VdnModel, path) -> None:
    """Write ``manifest.txt`` and ``params.bin`` (little-endian f64, row-major) into ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    lines = [f"format = {CHECKPOINT_FORMAT}", f"schema_version = {CHECKPOINT_VERSION}"]
    for key, value in configio.to_flat(model.config).items():
        lines.append(f"config.{key} = {value}")
    chunks, offset = [], 0
    for name, p in model.named_parameters():
        arr = np.ascontiguousarray(p.data, dtype="<f8")
        shape = "x".join(str(s) for s in arr.shape)
        lines.append(f"param {name} f64 {shape} {offset} {arr.size}")
        chunks.append(arr.tobytes(order="C"))
        offset += arr.nbytes
    (path / BLOB).write_bytes(b"".join(chunks))
    (path / MANIFEST).write_text("\n".join(lines) + "\n")


def _parse_manifest(text: str):
    header, records = {}, []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("param "):
            parts = line.split()
            if len(parts) != 6 or parts[2] != "f64":
                raise CorruptManifestError(f"line {lineno}: malformed parameter record")
            try:
                shape = tuple(int(s) for s in parts[3].split("x"))
                records.append((parts[1], shape, int(parts[4]), int(parts[5])))
            except ValueError:
                raise CorruptManifestError(f"line {lineno}: non-integer field") from None
        elif "=" in line:
            k, v = (s.strip() for s in line.split("=", 1))
            header[k] = v
        else:
            raise CorruptManifestError(f"line {lineno}: unrecognised line")
    if header.get("format") != CHECKPOINT_FORMAT:
        raise CorruptManifestError("missing or wrong checkpoint format tag")
    if header.get("schema_version") != str(CHECKPOINT_VERSION):
        raise CorruptManifestError(f"unsupported schema_version {header.get('schema_version')}")
    return header, records


def checkpoint_load(path, expected: ModelConfig | None = None) -> VdnModel:
    path = Path(path)
    try:
        text = (path / MANIFEST).read_text()
    except (OSError, UnicodeDecodeError) as exc:
        raise CorruptManifestError(f"cannot read manifest: {exc}") from None
    header, records = _parse_manifest(text)
    cfg_values = {k[len("config."):]: v for k, v in header.items() if k.startswith("config.")}
    try:
        config = configio.build(ModelConfig, cfg_values)
    except ContractError as exc:
        raise CorruptManifestError(f"bad config in manifest: {exc}") from None
    if expected is not None and dataclasses.asdict(expected) != dataclasses.asdict(config):
        diff = {
            k: (v, getattr(config, k))
            for k, v in dataclasses.asdict(expected).items()
            if getattr(config, k) != v
        }
        raise ConfigMismatchError(f"checkpoint config differs from expected: {diff}")

    model = VdnModel(config)
    params = dict(model.named_parameters())
    if [r[0] for r in records] != list(params):
        raise ConfigMismatchError("parameter names in manifest do not match the configured model")
    blob = (path / BLOB).read_bytes() if (path / BLOB).exists() else b""
    for name, shape, offset, length in records:
        target = params[name]
        if shape != target.shape or length != target.size:
            raise ConfigMismatchError(f"{name}: manifest shape {shape} vs model {target.shape}")
        end = offset + 8 * length
        if end > len(blob):
            raise TruncatedBlobError(f"{name}: needs bytes [{offset}, {end}) but blob has {len(blob)}")
        target.data = np.frombuffer(blob, dtype="<f8", count=length, offset=offset).astype(np.float64).reshape(shape)
    expected_size = sum(8 * r[3] for r in records)
    if len(blob) != expected_size:
        raise TruncatedBlobError(f"blob has {len(blob)} bytes, manifest describes {expected_size}")
    return model
