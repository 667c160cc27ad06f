"""Dataset generation and the binary container format.

Container layout (little-endian throughout)::

    magic   4 bytes  b"VSWN"
    version u32
    count   u32
    per array:
        name_len u16, name UTF-8
        dtype    u8   (0 = float32, 1 = float64)
        ndim     u32
        dims     u64 * ndim
        payload  row-major
    trailing bytes: UTF-8 JSON metadata record

Write -> read round-trips are bit-exact; readers validate magic, version and
payload sizes before returning anything.

Generation: Gaussian random fields sampled spectrally (Karhunen-Loeve) with
covariance scale*(-Laplacian + tau2*I)^(-power); a pseudo-spectral viscous
Burgers solver (integrating-factor RK4, 2/3-rule dealiasing); and a
finite-volume Darcy solver on the unit square (harmonic-mean face
coefficients, Jacobi-preconditioned conjugate gradients).  Every generator is
a pure function of its spec and seed; per-draw seeds derive from the master
seed by counter.
"""

from __future__ import annotations

import json
import math
import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np

__all__ = [
    "ContainerError",
    "BadMagicError",
    "TruncatedPayloadError",
    "UnknownDtypeError",
    "SolverError",
    "GrfSpec",
    "dataset_write",
    "dataset_read",
    "write_atomic",
    "sample_grf_1d",
    "sample_grf_1d_batch",
    "grf_1d_mode_weights",
    "sample_grf_2d",
    "sample_grf_2d_batch",
    "permeability_pushforward",
    "burgers_solve",
    "darcy_solve_rect",
    "generate_burgers_dataset",
    "generate_darcy_dataset",
    "import_raw_arrays",
]

MAGIC = b"VSWN"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class ContainerError(ValueError):
    """Base class for container format violations."""


class BadMagicError(ContainerError):
    pass


class TruncatedPayloadError(ContainerError):
    pass


class UnknownDtypeError(ContainerError):
    pass


class SolverError(RuntimeError):
    """Numerical failure inside a PDE solver."""


def write_atomic(path, payload: bytes):
    """Write bytes then rename into place, so readers never see partial files."""
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dataset_write(path, arrays, metadata):
    """Serialize named arrays plus a JSON metadata record."""
    chunks = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype not in _DTYPE_CODES:
            raise UnknownDtypeError(f"array {name!r} has unsupported dtype {arr.dtype}")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<BI", _DTYPE_CODES[arr.dtype], arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    chunks.append(json.dumps(metadata, sort_keys=True).encode("utf-8"))
    write_atomic(path, b"".join(chunks))


def _take(buf, offset, nbytes, what):
    end = offset + nbytes
    if end > len(buf):
        raise TruncatedPayloadError(f"file ends inside {what} (needed {nbytes} bytes at {offset})")
    return buf[offset:end], end


def dataset_read(path):
    """Parse a container; returns (ordered dict of arrays, metadata dict)."""
    with open(path, "rb") as fh:
        buf = fh.read()
    head, off = _take(buf, 0, 4, "magic")
    if head != MAGIC:
        raise BadMagicError(f"{path}: bad magic {head!r}, expected {MAGIC!r}")
    raw, off = _take(buf, off, 8, "header")
    version, count = struct.unpack("<II", raw)
    if version != VERSION:
        raise ContainerError(f"{path}: unsupported container version {version}")
    arrays = {}
    for _ in range(count):
        raw, off = _take(buf, off, 2, "name length")
        (name_len,) = struct.unpack("<H", raw)
        raw, off = _take(buf, off, name_len, "array name")
        name = raw.decode("utf-8")
        raw, off = _take(buf, off, 5, "array header")
        code, ndim = struct.unpack("<BI", raw)
        if code not in _DTYPES:
            raise UnknownDtypeError(f"{path}: array {name!r} has unknown dtype code {code}")
        raw, off = _take(buf, off, 8 * ndim, "array dims")
        dims = struct.unpack(f"<{ndim}Q", raw)
        dtype = _DTYPES[code]
        nbytes = dtype.itemsize * int(np.prod(dims, dtype=np.int64)) if ndim else dtype.itemsize
        raw, off = _take(buf, off, nbytes, f"payload of {name!r}")
        arrays[name] = np.frombuffer(raw, dtype=dtype).reshape(dims).copy()
    try:
        metadata = json.loads(buf[off:].decode("utf-8")) if off < len(buf) else {}
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"{path}: trailing metadata is not valid JSON: {exc}") from exc
    return arrays, metadata


# ---------------------------------------------------------------------------
# Gaussian random fields


@dataclass(frozen=True)
class GrfSpec:
    """Covariance scale*(-Laplacian + tau2*I)^(-power) on the chosen basis."""

    scale: float
    tau2: float
    power: float
    basis: str = "fourier-periodic"
    seed: int = 0

    def __post_init__(self):
        if self.scale <= 0 or self.tau2 <= 0 or self.power <= 0:
            raise ValueError(f"GrfSpec requires positive scale/tau2/power, got {self}")
        if self.basis not in ("fourier-periodic", "cosine-neumann"):
            raise ValueError(f"unknown GRF basis {self.basis!r}")


def _draw_rng(seed, index):
    return np.random.Generator(np.random.Philox(np.random.SeedSequence((seed, index))))


def grf_1d_mode_weights(spec, n):
    """KL weights: w_j = sqrt(scale) * (4 pi^2 j^2 + tau2)^(-power/2), j=0..n/2-1."""
    j = np.arange(n // 2)
    return math.sqrt(spec.scale) * (4.0 * math.pi**2 * j**2 + spec.tau2) ** (-spec.power / 2.0)


def sample_grf_1d_batch(spec, n, count):
    """Draws on the periodic unit interval at n points (n even).

    Each draw k uses its own counter-derived generator, so any draw is
    reproducible independently of batch size.  The field is the truncated KL
    sum over modes j < n/2 with an orthonormal sine/cosine pair per j >= 1
    and the constant mode at j = 0.
    """
    if spec.basis != "fourier-periodic":
        raise ValueError(f"1d sampler needs the fourier-periodic basis, got {spec.basis!r}")
    if n % 2 != 0:
        raise ValueError(f"grid size must be even for the periodic basis, got {n}")
    w = grf_1d_mode_weights(spec, n)
    n_modes = len(w)
    out = np.empty((count, n))
    for k in range(count):
        gen = _draw_rng(spec.seed, k)
        xi0 = gen.standard_normal()
        xc = gen.standard_normal(n_modes - 1)
        xs = gen.standard_normal(n_modes - 1)
        spectrum = np.zeros(n // 2 + 1, dtype=np.complex128)
        spectrum[0] = n * w[0] * xi0
        spectrum[1:n_modes] = (n / 2.0) * math.sqrt(2.0) * w[1:] * (xc - 1j * xs)
        out[k] = np.fft.irfft(spectrum, n)
    return out


def sample_grf_1d(spec, n):
    return sample_grf_1d_batch(spec, n, 1)[0]


def sample_grf_2d_batch(spec, h, w, count):
    """Cosine (Neumann) KL draws on the closed unit square at h x w points."""
    if spec.basis != "cosine-neumann":
        raise ValueError(f"2d sampler needs the cosine-neumann basis, got {spec.basis!r}")
    jh = np.arange(h)
    jw = np.arange(w)
    lam = math.pi**2 * (jh[:, None] ** 2 + jw[None, :] ** 2)
    weights = math.sqrt(spec.scale) * (lam + spec.tau2) ** (-spec.power / 2.0)
    # orthonormal cosine basis on [0, 1]: eta_0 = 1, eta_j = sqrt(2)
    def basis(extent):
        x = np.linspace(0.0, 1.0, extent)
        phi = np.cos(math.pi * np.outer(x, np.arange(extent)))
        phi[:, 1:] *= math.sqrt(2.0)
        return phi

    phi_h = basis(h)
    phi_w = basis(w)
    out = np.empty((count, h, w))
    for k in range(count):
        gen = _draw_rng(spec.seed, k)
        xi = gen.standard_normal((h, w))
        out[k] = phi_h @ (weights * xi) @ phi_w.T
    return out


def sample_grf_2d(spec, h, w):
    return sample_grf_2d_batch(spec, h, w, 1)[0]


def permeability_pushforward(field):
    """Two-phase map: 12 where the field is positive, 3 elsewhere (0 maps to 3)."""
    return np.where(np.asarray(field) > 0.0, 12.0, 3.0)


# ---------------------------------------------------------------------------
# 1D viscous Burgers, periodic pseudo-spectral


def burgers_solve(u0, nu, t_end):
    """March u_t + u u_x = nu u_xx on the periodic unit interval to t_end.

    Conservative form d/dx(u^2/2) with 2/3-rule dealiasing; the diffusion
    term is integrated exactly via the integrating factor, advanced with RK4.
    Accepts a single state (n,) or a batch (B, n); the step size follows an
    advective CFL bound from the initial data (diffusion imposes no limit
    because it is handled exactly).
    """
    u0 = np.asarray(u0, dtype=np.float64)
    single = u0.ndim == 1
    u = u0[None, :] if single else u0
    n = u.shape[-1]
    if n % 2 != 0:
        raise ValueError(f"burgers_solve needs an even grid, got {n}")
    if nu <= 0:
        raise ValueError(f"viscosity must be positive, got {nu}")
    if t_end <= 0:
        raise ValueError(f"t_end must be positive, got {t_end}")

    k = 2.0 * math.pi * np.fft.rfftfreq(n, d=1.0 / n)  # wavenumbers on [0,1)
    dealias = np.fft.rfftfreq(n, d=1.0 / n) <= n / 3.0
    lin = -nu * k**2

    dx = 1.0 / n
    umax = float(np.max(np.abs(u)))
    dt = 0.5 * dx / max(umax, 1e-8)
    steps = max(1, math.ceil(t_end / dt))
    dt = t_end / steps
    e_half = np.exp(lin * dt / 2.0)
    e_full = np.exp(lin * dt)

    def nonlinear(u_hat):
        ur = np.fft.irfft(u_hat * dealias, n)
        return -0.5j * k * np.fft.rfft(ur * ur)

    u_hat = np.fft.rfft(u)
    for step in range(steps):
        k1 = nonlinear(u_hat)
        k2 = nonlinear(e_half * (u_hat + (dt / 2.0) * k1))
        k3 = nonlinear(e_half * u_hat + (dt / 2.0) * k2)
        k4 = nonlinear(e_full * u_hat + dt * e_half * k3)
        u_hat = e_full * u_hat + (dt / 6.0) * (e_full * k1 + 2.0 * e_half * (k2 + k3) + k4)
        if step % 200 == 0 and not np.all(np.isfinite(u_hat)):
            raise SolverError(f"burgers_solve diverged at step {step}/{steps}")
    out = np.fft.irfft(u_hat, n)
    if not np.all(np.isfinite(out)):
        raise SolverError(f"burgers_solve produced non-finite values after {steps} steps")
    return out[0] if single else out


# ---------------------------------------------------------------------------
# 2D Darcy on the unit square, finite volume + preconditioned CG


def _darcy_faces(a):
    # harmonic means across cell faces; a is (B, h, w)
    harm = lambda p, q: 2.0 * p * q / (p + q)
    a_e = harm(a[:, :-1, :], a[:, 1:, :])  # faces between rows i, i+1
    a_s = harm(a[:, :, :-1], a[:, :, 1:])  # faces between cols j, j+1
    return a_e, a_s


def darcy_solve_rect(a, f=1.0, tol=1e-10, max_iter=None):
    """Solve -div(a grad u) = f with zero Dirichlet boundary on the a-grid.

    Five-point finite volumes with harmonic-mean face coefficients, solved by
    Jacobi-preconditioned conjugate gradients until the true relative
    residual drops below ``tol``.  Accepts (h, w) or (B, h, w) permeability.
    """
    a = np.asarray(a, dtype=np.float64)
    single = a.ndim == 2
    ab = a[None] if single else a
    _, h, w = ab.shape
    if h < 3 or w < 3:
        raise ValueError(f"grid {h}x{w} too small; need at least 3 points per side")
    if np.any(ab <= 0):
        raise ValueError("permeability must be positive everywhere")

    inv_dx2 = float((h - 1) ** 2)
    inv_dy2 = float((w - 1) ** 2)
    a_e, a_s = _darcy_faces(ab)
    # coefficients seen from each interior cell (i in 1..h-2, j in 1..w-2)
    c_n = a_e[:, :-1, 1:-1] * inv_dx2  # neighbor i-1
    c_s = a_e[:, 1:, 1:-1] * inv_dx2  # neighbor i+1
    c_w = a_s[:, 1:-1, :-1] * inv_dy2  # neighbor j-1
    c_e = a_s[:, 1:-1, 1:] * inv_dy2  # neighbor j+1
    diag = c_n + c_s + c_w + c_e

    def apply_op(u):
        # u holds interior unknowns (B, h-2, w-2); Dirichlet zeros outside
        up = np.pad(u, ((0, 0), (1, 1), (1, 1)))
        return (
            diag * u
            - c_n * up[:, :-2, 1:-1]
            - c_s * up[:, 2:, 1:-1]
            - c_w * up[:, 1:-1, :-2]
            - c_e * up[:, 1:-1, 2:]
        )

    b = np.full_like(diag, float(f))
    b_norm = np.sqrt(np.sum(b**2, axis=(1, 2)))
    u = np.zeros_like(b)
    r = b - apply_op(u)
    z = r / diag
    p = z.copy()
    rz = np.sum(r * z, axis=(1, 2))
    n_unknown = (h - 2) * (w - 2)
    limit = max_iter or max(40 * (h + w), 10 * n_unknown // (h + w))
    for _ in range(limit):
        res = np.sqrt(np.sum(r**2, axis=(1, 2))) / b_norm
        if np.max(res) < tol:
            break
        ap = apply_op(p)
        alpha = (rz / np.sum(p * ap, axis=(1, 2)))[:, None, None]
        u = u + alpha * p
        r = r - alpha * ap
        z = r / diag
        rz_new = np.sum(r * z, axis=(1, 2))
        p = z + (rz_new / rz)[:, None, None] * p
        rz = rz_new
    res = np.sqrt(np.sum((b - apply_op(u)) ** 2, axis=(1, 2))) / b_norm
    if np.max(res) >= tol:
        raise SolverError(
            f"darcy_solve_rect: CG stalled, relative residual {np.max(res):.3e} after {limit} iters"
        )
    full = np.zeros((ab.shape[0], h, w))
    full[:, 1:-1, 1:-1] = u
    return full[0] if single else full


# ---------------------------------------------------------------------------
# dataset assembly


def _input_range(arr):
    return [float(arr.min()), float(arr.max())]


def generate_burgers_dataset(n, n_train, n_test, nu, t_end, grf, seed):
    """Initial condition -> terminal state pairs for the periodic Burgers map."""
    if n_train < 1 or n_test < 1:
        raise ValueError(f"need at least one sample per split, got {n_train}/{n_test}")
    spec = GrfSpec(scale=grf["scale"], tau2=grf["tau2"], power=grf["power"],
                   basis="fourier-periodic", seed=seed)
    total = n_train + n_test
    u0 = sample_grf_1d_batch(spec, n, total)
    u1 = burgers_solve(u0, nu, t_end)
    arrays = {
        "train_x": u0[:n_train].astype(np.float32),
        "train_y": u1[:n_train].astype(np.float32),
        "test_x": u0[n_train:].astype(np.float32),
        "test_y": u1[n_train:].astype(np.float32),
    }
    metadata = {
        "problem": "burgers",
        "grid": [n],
        "nu": nu,
        "t_end": t_end,
        "grf": {"scale": grf["scale"], "tau2": grf["tau2"], "power": grf["power"],
                "basis": "fourier-periodic"},
        "seed": seed,
        "samples": {"train": n_train, "test": n_test},
        "input_range": _input_range(arrays["train_x"]),
    }
    return arrays, metadata


def generate_darcy_dataset(h, w, n_train, n_test, grf, source, seed):
    """Permeability -> pressure pairs for Darcy flow on the unit square."""
    if n_train < 1 or n_test < 1:
        raise ValueError(f"need at least one sample per split, got {n_train}/{n_test}")
    spec = GrfSpec(scale=grf["scale"], tau2=grf["tau2"], power=grf["power"],
                   basis="cosine-neumann", seed=seed)
    total = n_train + n_test
    fields = sample_grf_2d_batch(spec, h, w, total)
    perm = permeability_pushforward(fields)
    pressure = darcy_solve_rect(perm, f=source)
    arrays = {
        "train_x": perm[:n_train].astype(np.float32),
        "train_y": pressure[:n_train].astype(np.float32),
        "test_x": perm[n_train:].astype(np.float32),
        "test_y": pressure[n_train:].astype(np.float32),
    }
    metadata = {
        "problem": "darcy",
        "grid": [h, w],
        "source": source,
        "grf": {"scale": grf["scale"], "tau2": grf["tau2"], "power": grf["power"],
                "basis": "cosine-neumann"},
        "seed": seed,
        "samples": {"train": n_train, "test": n_test},
        "input_range": _input_range(arrays["train_x"]),
    }
    return arrays, metadata


def import_raw_arrays(entries, metadata):
    """Adapter for third-party data: raw binary blobs + a sidecar description.

    ``entries`` maps array names to {"path", "dtype" ("f32"/"f64"), "shape"}.
    Returns (arrays, metadata) ready for :func:`dataset_write`.
    """
    dtype_map = {"f32": np.float32, "f64": np.float64}
    arrays = {}
    for name, ent in entries.items():
        try:
            dtype = dtype_map[ent["dtype"]]
        except KeyError:
            raise UnknownDtypeError(
                f"array {name!r}: dtype must be one of {sorted(dtype_map)}, got {ent.get('dtype')!r}"
            ) from None
        shape = tuple(int(s) for s in ent["shape"])
        raw = np.fromfile(ent["path"], dtype=dtype)
        expected = int(np.prod(shape, dtype=np.int64))
        if raw.size != expected:
            raise TruncatedPayloadError(
                f"array {name!r}: file {ent['path']} holds {raw.size} values, shape needs {expected}"
            )
        arrays[name] = raw.reshape(shape)
    required = {"train_x", "train_y", "test_x", "test_y"}
    missing = required - arrays.keys()
    if missing:
        raise ContainerError(f"imported dataset is missing arrays: {sorted(missing)}")
    metadata = dict(metadata)
    metadata.setdefault("input_range", _input_range(arrays["train_x"]))
    metadata.setdefault("grid", list(arrays["train_x"].shape[1:]))
    return arrays, metadata
