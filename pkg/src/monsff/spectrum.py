"""Energy spectra: SYK exact diagonalization, GUE sampling, file IO.

Majoranas are realized on ``N/2`` qubits through a Jordan-Wigner chain,

    chi_{2j}   = s * Z_0 ... Z_{j-1} X_j
    chi_{2j+1} = s * Z_0 ... Z_{j-1} Y_j

with ``s = sqrt(anticommutator / 2)`` so that ``{chi_i, chi_j} =
anticommutator * delta_ij``.  The default ``anticommutator = 1`` (chi^2 = 1/2)
is the standard SYK convention for the coupling variance 6 J^2 / N^3.  With
``anticommutator = 2`` every energy doubles and ``Tr H^2 / d`` becomes
``C(N,4) * 6 J^2 / N^3 ~ N/4``, the width of the Gaussian in :func:`syk_dos`.

Products of Majoranas are Pauli strings, stored as ``(x_mask, z_mask, k)``
for the operator ``i^k X^x Z^z``.  Such an operator has exactly one nonzero
per column, ``M[b ^ x, b] = i^k (-1)^popcount(z & b)``, which is how the
Hamiltonian is assembled without any dense matrix products.
"""
from __future__ import annotations

import io
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .errors import ResourceError, SpectrumFileError, ValidationError
from .noise import NoiseStream

log = logging.getLogger(__name__)

DEFAULT_MAX_N = 20
HARD_MAX_N = 26
SPECTRUM_MAGIC = b"SFFSPEC1"
SOURCES = ("SYK", "GUE", "file")
SYMMETRY_CLASSES = ("GUE", "GOE", "GSE", "unknown")


@dataclass(frozen=True)
class SykParameters:
    n_majorana: int
    coupling_scale: float = 1.0
    seed: int = 0
    anticommutator: float = 1.0

    def __post_init__(self):
        n = self.n_majorana
        if not isinstance(n, (int, np.integer)) or n < 4 or n % 2:
            raise ValidationError(f"n_majorana must be an even integer >= 4, got {n!r}")
        if not self.coupling_scale > 0:
            raise ValidationError("coupling_scale must be positive")
        if self.anticommutator not in (1.0, 2.0):
            raise ValidationError("anticommutator must be 1 or 2")
        if not 0 <= int(self.seed) < 2**64:
            raise ValidationError("seed must be an unsigned 64-bit integer")

    @property
    def dim(self) -> int:
        return 2 ** (self.n_majorana // 2)

    @property
    def coupling_variance(self) -> float:
        return 6.0 * self.coupling_scale**2 / self.n_majorana**3


def syk_symmetry_class(n_majorana: int) -> str:
    """Random-matrix class of a single parity sector."""
    return {0: "GOE", 2: "GUE", 4: "GSE", 6: "GUE"}[n_majorana % 8]


@dataclass(frozen=True)
class SpectrumRealization:
    energies: np.ndarray
    dim: int
    source: str = "file"
    symmetry_class: str = "unknown"
    disorder_seed: int = 0
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        e = np.asarray(self.energies, dtype=float).copy()
        if e.ndim != 1 or e.size != self.dim:
            raise ValidationError(f"expected {self.dim} energies, got shape {e.shape}")
        if not np.all(np.isfinite(e)):
            raise ValidationError("energies must be finite")
        if np.any(np.diff(e) < 0):
            raise ValidationError("energies must be sorted ascending")
        if self.source not in SOURCES:
            raise ValidationError(f"unknown source {self.source!r}")
        if self.symmetry_class not in SYMMETRY_CLASSES:
            raise ValidationError(f"unknown symmetry class {self.symmetry_class!r}")
        e.flags.writeable = False
        object.__setattr__(self, "energies", e)

    @classmethod
    def from_energies(cls, energies, **kw) -> "SpectrumRealization":
        e = np.sort(np.asarray(energies, dtype=float))
        return cls(e, e.size, **kw)


@dataclass(frozen=True)
class DosModel:
    n_majorana: int
    dim: int

    def __post_init__(self):
        if self.dim != 2 ** (self.n_majorana // 2):
            raise ValidationError("DosModel requires dim = 2^(N/2)")


# --- Majorana algebra -------------------------------------------------------

def majorana_string(i: int, n_sites: int) -> tuple[int, int, int]:
    """Pauli string (x, z, k) of chi_i (0-based) without the normalization."""
    j, kind = divmod(i, 2)
    if j >= n_sites:
        raise ValidationError("Majorana index out of range")
    z_string = (1 << j) - 1
    if kind == 0:
        return 1 << j, z_string, 0
    return 1 << j, z_string | (1 << j), 1


def pauli_product(a, b):
    x1, z1, k1 = a
    x2, z2, k2 = b
    sign = 2 * (int(z1 & x2).bit_count() & 1)
    return x1 ^ x2, z1 ^ z2, (k1 + k2 + sign) % 4


def pauli_matrix(s, n_sites: int) -> np.ndarray:
    x, z, k = s
    d = 1 << n_sites
    b = np.arange(d, dtype=np.int64)
    m = np.zeros((d, d), dtype=complex)
    m[b ^ x, b] = (1j) ** k * (1 - 2 * (np.bitwise_count(b & z) & 1).astype(np.int64))
    return m


def parity_diagonal(n_sites: int) -> np.ndarray:
    """Eigenvalues (+1/-1) of the fermion parity prod_j Z_j in the qubit basis."""
    b = np.arange(1 << n_sites, dtype=np.int64)
    return 1.0 - 2.0 * (np.bitwise_count(b) & 1)


def _check_size(n_majorana: int, allow_large: bool, max_n: int):
    cap = HARD_MAX_N if allow_large else max_n
    if n_majorana > cap:
        raise ResourceError(
            f"N={n_majorana} exceeds the configured maximum N={cap} "
            f"(d={2 ** (cap // 2)}); pass allow_large for up to N={HARD_MAX_N}"
        )
    if n_majorana > max_n:
        log.warning("N=%d: dense matrix of dimension %d needs ~%.1f GB",
                    n_majorana, 2 ** (n_majorana // 2), 16 * 4 ** (n_majorana // 2) / 1e9)


def sample_syk_couplings(params: SykParameters, stream: NoiseStream) -> dict:
    """Gaussian couplings J_klmn (1-based, k<l<m<n), variance 6 J^2 / N^3."""
    n = params.n_majorana
    if n < 4:
        raise ValidationError("need at least four Majoranas")
    keys = list(combinations(range(1, n + 1), 4))
    values = stream.normal(len(keys)) * math.sqrt(params.coupling_variance)
    return dict(zip(keys, values.tolist()))


def build_syk_hamiltonian(params: SykParameters, couplings: dict, *, allow_large=False,
                          max_n=DEFAULT_MAX_N) -> np.ndarray:
    n = params.n_majorana
    _check_size(n, allow_large, max_n)
    expected = math.comb(n, 4)
    if len(couplings) != expected:
        raise ValidationError(f"need {expected} couplings, got {len(couplings)}")
    n_sites = n // 2
    d = 1 << n_sites
    chis = [majorana_string(i, n_sites) for i in range(n)]
    scale = (params.anticommutator / 2.0) ** 2
    b = np.arange(d, dtype=np.int64)
    h = np.zeros((d, d), dtype=complex)
    phases = np.array([1, 1j, -1, -1j])
    for (k, l, m, q), jval in couplings.items():
        s = pauli_product(pauli_product(chis[k - 1], chis[l - 1]),
                          pauli_product(chis[m - 1], chis[q - 1]))
        x, z, ph = s
        signs = 1 - 2 * (np.bitwise_count(b & z) & 1).astype(np.int64)
        h[b ^ x, b] += (jval * scale * phases[ph]) * signs
    return h


def diagonalize(h: np.ndarray, *, source="file", symmetry_class="unknown", disorder_seed=0,
                metadata=None, tol=1e-10) -> SpectrumRealization:
    h = np.asarray(h)
    if h.ndim != 2 or h.shape[0] != h.shape[1]:
        raise ValidationError("matrix must be square")
    asym = np.max(np.abs(h - h.conj().T)) if h.size else 0.0
    if asym > tol:
        raise ValidationError(f"matrix is not Hermitian (max |H - H^dag| = {asym:.3g})")
    e = np.linalg.eigvalsh(h)
    return SpectrumRealization(e, e.size, source, symmetry_class, int(disorder_seed), metadata or {})


def syk_spectrum(params: SykParameters, stream: NoiseStream, *, parity: int | None = None,
                 allow_large=False, max_n=DEFAULT_MAX_N) -> SpectrumRealization:
    """Couplings -> Hamiltonian -> spectrum, optionally restricted to one parity
    sector (0 = even, 1 = odd)."""
    couplings = sample_syk_couplings(params, stream)
    h = build_syk_hamiltonian(params, couplings, allow_large=allow_large, max_n=max_n)
    meta = {"n_majorana": params.n_majorana, "coupling_scale": params.coupling_scale,
            "anticommutator": params.anticommutator, "parity": parity}
    if parity is not None:
        if parity not in (0, 1):
            raise ValidationError("parity must be 0, 1 or None")
        keep = parity_diagonal(params.n_majorana // 2) == (1 - 2 * parity)
        h = h[np.ix_(keep, keep)]
    return diagonalize(h, source="SYK", symmetry_class=syk_symmetry_class(params.n_majorana),
                       disorder_seed=params.seed, metadata=meta)


def sample_gue_spectrum(dim: int, width: float, stream: NoiseStream) -> SpectrumRealization:
    """GUE eigenvalues with semicircle radius ``width``."""
    if dim < 2:
        raise ValidationError("GUE dimension must be at least 2")
    if not width > 0:
        raise ValidationError("width must be positive")
    sigma = width / (2.0 * math.sqrt(dim))
    g = (stream.normal((dim, dim)) + 1j * stream.normal((dim, dim))) * (sigma / math.sqrt(2.0))
    h = (g + g.conj().T) / math.sqrt(2.0)
    return diagonalize(h, source="GUE", symmetry_class="GUE", metadata={"width": width})


def syk_dos(energy, model: DosModel):
    """Large-N Gaussian density of states, normalized to the dimension."""
    n = model.n_majorana
    return math.sqrt(2.0 / (math.pi * n)) * model.dim * np.exp(-2.0 * np.asarray(energy) ** 2 / n)


def spacing_ratios(energies, degeneracy_tol=None) -> np.ndarray:
    """r~_i = min(s_i, s_{i+1}) / max(s_i, s_{i+1}) over consecutive spacings."""
    e = np.asarray(energies, dtype=float)
    if degeneracy_tol is not None:
        e = distinct_levels(e, degeneracy_tol)[0]
    s = np.diff(e)
    a, b = s[:-1], s[1:]
    return np.minimum(a, b) / np.maximum(a, b)


def distinct_levels(energies, tol: float = 1e-9):
    """Cluster levels closer than ``tol * max(1, spread)``; returns
    (representative energies, multiplicities, cluster label per level)."""
    e = np.asarray(energies, dtype=float)
    scale = tol * max(1.0, float(np.ptp(e)) if e.size else 1.0)
    new = np.concatenate(([True], np.diff(e) > scale))
    labels = np.cumsum(new) - 1
    counts = np.bincount(labels)
    reps = np.bincount(labels, weights=e) / counts
    return reps, counts, labels


# --- file IO ----------------------------------------------------------------

def save_spectrum(spec: SpectrumRealization, path) -> None:
    meta = {
        "version": 1,
        "source": spec.source,
        "symmetry_class": spec.symmetry_class,
        "dim": spec.dim,
        "seed": spec.disorder_seed,
        "N": spec.metadata.get("n_majorana"),
        "metadata": spec.metadata,
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(SPECTRUM_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(np.asarray(spec.energies, dtype="<f8").tobytes())


def load_spectrum(path) -> SpectrumRealization:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != SPECTRUM_MAGIC:
        if raw[:1] in (b"#",) or raw[:1].isdigit() or raw[:1] in (b"-", b"+", b".", b" "):
            return load_spectrum_csv(io.StringIO(raw.decode("utf-8")))
        raise SpectrumFileError(f"{path}: bad magic at offset 0")
    if len(raw) < 16:
        raise SpectrumFileError(f"{path}: truncated header at offset 8")
    (n_meta,) = struct.unpack("<Q", raw[8:16])
    end = 16 + n_meta
    if end > len(raw):
        raise SpectrumFileError(f"{path}: metadata block runs past end of file (offset 16, length {n_meta})")
    try:
        meta = json.loads(raw[16:end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise SpectrumFileError(f"{path}: malformed metadata at offset 16: {exc}") from None
    body = raw[end:]
    if len(body) % 8:
        raise SpectrumFileError(f"{path}: eigenvalue block at offset {end} is not a multiple of 8 bytes")
    e = np.frombuffer(body, dtype="<f8").astype(float)
    if e.size != meta.get("dim"):
        raise SpectrumFileError(f"{path}: header says dim={meta.get('dim')} but found {e.size} values at offset {end}")
    try:
        return SpectrumRealization(e, e.size, meta["source"], meta["symmetry_class"],
                                   int(meta.get("seed") or 0), meta.get("metadata") or {})
    except (KeyError, ValidationError) as exc:
        raise SpectrumFileError(f"{path}: invalid metadata: {exc}") from None


def load_spectrum_csv(src) -> SpectrumRealization:
    """One eigenvalue per line; ``#`` starts a comment."""
    fh = open(src) if isinstance(src, (str, bytes)) or hasattr(src, "__fspath__") else src
    values = []
    with fh:
        for lineno, line in enumerate(fh, 1):
            text = line.split("#", 1)[0].strip().rstrip(",")
            if not text:
                continue
            try:
                values.append(float(text))
            except ValueError:
                raise SpectrumFileError(f"line {lineno}: cannot parse {text!r} as a number") from None
    if not values:
        raise SpectrumFileError("no eigenvalues found")
    return SpectrumRealization.from_energies(values, source="file")
