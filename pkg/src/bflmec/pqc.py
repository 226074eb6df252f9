"""Simplified Dilithium-style lattice signatures over R_q = Z_q[X]/(X^n + 1).

Polynomials are int64 numpy arrays holding centered coefficients in
(-q/2, q/2].  Multiplication is schoolbook negacyclic convolution; there is
no NTT, no public-key compression and no hints.

Byte layout (all integers little-endian):

* polynomial: ``n_lat`` x int32, centered coefficients
* public key: ``A`` row-major (k_rows * l_cols polys) then ``t`` (k_rows polys)
* secret key: public key bytes, then ``s1`` (l_cols polys), ``s2`` (k_rows polys)
* signature: ``z`` (l_cols polys) then ``c`` (one poly)
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

CHALLENGE_DOMAIN = b"BFLMEC/challenge/v1"
COEFF_BYTES = 4


class ParameterError(ValueError):
    pass


class SigningError(RuntimeError):
    pass


def _is_prime(q: int) -> bool:
    if q < 2:
        return False
    if q % 2 == 0:
        return q == 2
    f = 3
    while f * f <= q:
        if q % f == 0:
            return False
        f += 2
    return True


@dataclass(frozen=True)
class LatticeParams:
    q: int
    n_lat: int
    k_rows: int
    l_cols: int
    eta_bound: int
    gamma1: int
    gamma2: int
    tau: int
    name: str = "custom"

    @property
    def beta(self) -> int:
        return self.tau * self.eta_bound

    @property
    def two_gamma2(self) -> int:
        return 2 * self.gamma2

    def validate(self) -> None:
        if not _is_prime(self.q):
            raise ParameterError(f"q={self.q} is not prime")
        if self.n_lat < 1 or self.n_lat & (self.n_lat - 1):
            raise ParameterError(f"n_lat={self.n_lat} is not a power of two")
        if self.k_rows < 1 or self.l_cols < 1:
            raise ParameterError("matrix dimensions must be positive")
        if self.eta_bound < 1:
            raise ParameterError("eta_bound must be >= 1")
        if not 1 <= self.tau <= self.n_lat:
            raise ParameterError("tau must lie in [1, n_lat]")
        if self.gamma1 <= self.beta or self.gamma2 <= self.beta:
            raise ParameterError("gamma1 and gamma2 must exceed beta = tau * eta_bound")
        # HighBits are only well defined modulo q when 2*gamma2 | q - 1.
        if (self.q - 1) % self.two_gamma2:
            raise ParameterError("2*gamma2 must divide q - 1")
        if self.q >= 2**31:
            raise ParameterError("q must fit the int32 coefficient packing")


_Q = 8380417

TOY = LatticeParams(q=_Q, n_lat=64, k_rows=2, l_cols=2, eta_bound=2,
                    gamma1=2**17, gamma2=(_Q - 1) // 88, tau=20, name="toy")
MINI = LatticeParams(q=_Q, n_lat=256, k_rows=4, l_cols=4, eta_bound=2,
                     gamma1=2**17, gamma2=(_Q - 1) // 88, tau=39, name="mini")
PARAM_SETS = {"toy": TOY, "mini": MINI}


def get_params(name: str) -> LatticeParams:
    try:
        return PARAM_SETS[name]
    except KeyError:
        raise ParameterError(f"unknown parameter set {name!r}; known: {sorted(PARAM_SETS)}") from None


# ---------------------------------------------------------------- ring ops

def center(a, q: int) -> np.ndarray:
    """Reduce to the centered range (-q/2, q/2]."""
    r = np.mod(np.asarray(a, dtype=np.int64), q)
    return np.where(r > q // 2, r - q, r)


def poly_mul(a: np.ndarray, b: np.ndarray, params: LatticeParams) -> np.ndarray:
    """Negacyclic product of two reduced polynomials."""
    n = params.n_lat
    full = np.convolve(np.asarray(a, dtype=np.int64), np.asarray(b, dtype=np.int64))
    out = full[:n].copy()
    out[: n - 1] -= full[n:]
    return center(out, params.q)


def mat_vec(A: list[list[np.ndarray]], v: list[np.ndarray], params: LatticeParams) -> list[np.ndarray]:
    out = []
    for row in A:
        acc = np.zeros(params.n_lat, dtype=np.int64)
        for a, x in zip(row, v):
            acc += poly_mul(a, x, params)
        out.append(center(acc, params.q))
    return out


def scale_vec(c: np.ndarray, v: list[np.ndarray], params: LatticeParams) -> list[np.ndarray]:
    return [poly_mul(c, x, params) for x in v]


def inf_norm(v: list[np.ndarray]) -> int:
    return max(int(np.max(np.abs(p))) for p in v)


# ------------------------------------------------------------ decomposition

def decompose(w: int, two_gamma2: int) -> tuple[int, int]:
    """Split ``w`` into ``(high, low)`` with ``w == high * two_gamma2 + low``.

    ``low`` lies in (-gamma2, gamma2].
    """
    gamma2 = two_gamma2 // 2
    low = w % two_gamma2
    if low > gamma2:
        low -= two_gamma2
    return (w - low) // two_gamma2, low


def _decompose_array(w: np.ndarray, two_gamma2: int) -> tuple[np.ndarray, np.ndarray]:
    gamma2 = two_gamma2 // 2
    low = np.mod(w, two_gamma2)
    low = np.where(low > gamma2, low - two_gamma2, low)
    return (w - low) // two_gamma2, low


def high_bits(v: list[np.ndarray], params: LatticeParams) -> list[np.ndarray]:
    # Canonical modulo (q-1)/(2*gamma2) so that +q/2 and -q/2 agree.
    m = (params.q - 1) // params.two_gamma2
    return [np.mod(_decompose_array(p, params.two_gamma2)[0], m) for p in v]


def low_bits(v: list[np.ndarray], params: LatticeParams) -> list[np.ndarray]:
    return [_decompose_array(p, params.two_gamma2)[1] for p in v]


# --------------------------------------------------------------- key types

@dataclass(frozen=True)
class PublicKey:
    A: list[list[np.ndarray]]
    t: list[np.ndarray]

    def to_bytes(self) -> bytes:
        return _pack([p for row in self.A for p in row] + list(self.t))

    @classmethod
    def from_bytes(cls, data: bytes, params: LatticeParams) -> "PublicKey":
        k, l = params.k_rows, params.l_cols
        polys = _unpack(data, k * l + k, params)
        A = [polys[i * l:(i + 1) * l] for i in range(k)]
        return cls(A=A, t=polys[k * l:])

    def __eq__(self, other):
        return isinstance(other, PublicKey) and self.to_bytes() == other.to_bytes()

    __hash__ = None


@dataclass(frozen=True)
class SecretKey:
    pk: PublicKey
    s1: list[np.ndarray]
    s2: list[np.ndarray]

    def to_bytes(self) -> bytes:
        return self.pk.to_bytes() + _pack(list(self.s1) + list(self.s2))

    @classmethod
    def from_bytes(cls, data: bytes, params: LatticeParams) -> "SecretKey":
        k, l, n = params.k_rows, params.l_cols, params.n_lat
        split = (k * l + k) * n * COEFF_BYTES
        pk = PublicKey.from_bytes(data[:split], params)
        polys = _unpack(data[split:], l + k, params)
        return cls(pk=pk, s1=polys[:l], s2=polys[l:])

    @property
    def A(self):
        return self.pk.A

    @property
    def t(self):
        return self.pk.t


@dataclass(frozen=True)
class LatticeKeypair:
    pk: PublicKey
    sk: SecretKey


@dataclass(frozen=True)
class LatticeSignature:
    z: list[np.ndarray]
    c: np.ndarray

    def to_bytes(self) -> bytes:
        return _pack(list(self.z) + [self.c])

    @classmethod
    def from_bytes(cls, data: bytes, params: LatticeParams) -> "LatticeSignature":
        polys = _unpack(data, params.l_cols + 1, params)
        return cls(z=polys[:-1], c=polys[-1])

    def __eq__(self, other):
        return isinstance(other, LatticeSignature) and self.to_bytes() == other.to_bytes()

    __hash__ = None


def _pack(polys: list[np.ndarray]) -> bytes:
    if not polys:
        return b""
    return np.concatenate(polys).astype("<i4").tobytes()


def _unpack(data: bytes, count: int, params: LatticeParams) -> list[np.ndarray]:
    n = params.n_lat
    if len(data) != count * n * COEFF_BYTES:
        raise ValueError(f"expected {count * n * COEFF_BYTES} bytes, got {len(data)}")
    flat = np.frombuffer(data, dtype="<i4").astype(np.int64)
    bound = params.q // 2
    if np.any(flat > bound) or np.any(flat <= -params.q + bound):
        raise ValueError("coefficient outside centered range")
    return [flat[i * n:(i + 1) * n].copy() for i in range(count)]


# ---------------------------------------------------------------- sampling

def _uniform_polys(rng: np.random.Generator, count: int, lo: int, hi: int, n: int) -> list[np.ndarray]:
    return [rng.integers(lo, hi, size=n, endpoint=True, dtype=np.int64) for _ in range(count)]


def keypair_gen(params: LatticeParams, rng: np.random.Generator) -> LatticeKeypair:
    params.validate()
    n, q = params.n_lat, params.q
    A = [[center(rng.integers(0, q, size=n, dtype=np.int64), q) for _ in range(params.l_cols)]
         for _ in range(params.k_rows)]
    s1 = _uniform_polys(rng, params.l_cols, -params.eta_bound, params.eta_bound, n)
    s2 = _uniform_polys(rng, params.k_rows, -params.eta_bound, params.eta_bound, n)
    As1 = mat_vec(A, s1, params)
    t = [center(a + b, q) for a, b in zip(As1, s2)]
    pk = PublicKey(A=A, t=t)
    return LatticeKeypair(pk=pk, sk=SecretKey(pk=pk, s1=s1, s2=s2))


def _w1_bytes(w1: list[np.ndarray]) -> bytes:
    return np.concatenate(w1).astype("<u4").tobytes()


def hash_challenge(message: bytes, w1: list[np.ndarray], params: LatticeParams) -> np.ndarray:
    """Map ``message || w1`` to a polynomial with exactly ``tau`` entries in {-1, +1}."""
    seed = hashlib.sha256(CHALLENGE_DOMAIN + message + _w1_bytes(w1)).digest()

    def stream():
        counter = 0
        while True:
            yield from hashlib.sha256(seed + counter.to_bytes(4, "little")).digest()
            counter += 1

    bytes_iter = stream()
    signs, sign_bits = 0, 0
    n = params.n_lat
    c = np.zeros(n, dtype=np.int64)
    # Inside-out Fisher-Yates over the last tau slots.
    for i in range(n - params.tau, n):
        while True:
            if i < 256:
                j = next(bytes_iter)
            else:
                j = next(bytes_iter) | (next(bytes_iter) << 8)
            if j <= i:
                break
        if sign_bits == 0:
            signs, sign_bits = int.from_bytes(bytes(next(bytes_iter) for _ in range(8)), "little"), 64
        c[i] = c[j]
        c[j] = 1 - 2 * (signs & 1)
        signs >>= 1
        sign_bits -= 1
    return c


def sign_traced(sk: SecretKey, message: bytes, params: LatticeParams, rng: np.random.Generator,
                max_iterations: int = 1000):
    """Sign and also return the accepted masking vector and the loop count."""
    bound = params.gamma1 - 1
    for attempt in range(1, max_iterations + 1):
        y = _uniform_polys(rng, params.l_cols, -bound, bound, params.n_lat)
        Ay = mat_vec(sk.A, y, params)
        w1 = high_bits(Ay, params)
        c = hash_challenge(message, w1, params)
        z = [center(a + b, params.q) for a, b in zip(y, scale_vec(c, sk.s1, params))]
        if inf_norm(z) >= params.gamma1 - params.beta:
            continue
        r = [center(a - b, params.q) for a, b in zip(Ay, scale_vec(c, sk.s2, params))]
        if inf_norm(low_bits(r, params)) >= params.gamma2 - params.beta:
            continue
        return LatticeSignature(z=z, c=c), y, attempt
    raise SigningError(f"rejection sampling exceeded {max_iterations} iterations")


def sign(sk: SecretKey, message: bytes, params: LatticeParams, rng: np.random.Generator,
         max_iterations: int = 1000) -> LatticeSignature:
    return sign_traced(sk, message, params, rng, max_iterations)[0]


def verify(pk: PublicKey, message: bytes, sig: LatticeSignature | bytes, params: LatticeParams) -> bool:
    """Return True iff the signature is well formed, short, and its challenge recomputes."""
    try:
        if isinstance(sig, (bytes, bytearray)):
            sig = LatticeSignature.from_bytes(bytes(sig), params)
        if len(sig.z) != params.l_cols or any(len(p) != params.n_lat for p in sig.z):
            return False
        c = np.asarray(sig.c, dtype=np.int64)
        if len(c) != params.n_lat or np.any(np.abs(c) > 1) or int(np.count_nonzero(c)) != params.tau:
            return False
        if inf_norm(sig.z) >= params.gamma1 - params.beta:
            return False
        Az = mat_vec(pk.A, sig.z, params)
        ct = scale_vec(c, pk.t, params)
        w1 = high_bits([center(a - b, params.q) for a, b in zip(Az, ct)], params)
    except (ValueError, TypeError):
        return False
    return bool(np.array_equal(hash_challenge(message, w1, params), c))
