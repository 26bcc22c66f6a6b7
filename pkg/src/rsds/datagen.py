"""Ground-truth generators and the on-disk dataset format.

Three benchmark families:

- gen_synthetic: sparse cosine-MLP regime transitions with
  regime-dependent variances drawn from U(0.001, 0.5), resampled until
  at least one regime pair has well-spread dimension-wise ratios; a
  sticky cyclic autonomous switch (stay 0.9, next 0.1); observations
  through a random two-layer leaky-rectifier net (hidden width equal to
  the observation dimension), optionally after appending N(0, 0.01)
  noise coordinates (the 5m observation case).
- gen_cosine_toy: the one-dimensional three-regime system with means
  cos(z), cos(z - pi/2), cos(z + pi/2) and equal variances.
- gen_bouncing_ball_state: a 2-D position state with four diagonal
  velocity regimes; switching is a deterministic function of the
  previous position (flip a velocity component within one step of a
  wall; corner contact flips both), realized exactly as a recurrent
  switching net made of bounded hinge ramps.

All generation draws normals via the polar Box-Muller helper on
per-sequence PCG64 streams, so fixtures are byte-stable across runs and
platforms and sequences are independent of generation order.

File format "RSDS", version 1, little-endian:
    magic "RSDS" | u16 version | u8 flags (bit0 latents, bit1 regimes)
    u32 N, T, n, m, K
    x  as N*T*n float64 (row-major)
    z  as N*T*m float64        (if flag bit0)
    s  as N*T uint32, 0-based  (if flag bit1)
    u32 byte length | UTF-8 metadata (key=value lines)
A plain-text sidecar with the same metadata is written next to the file.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from rsds import prng
from rsds.errors import ConfigError, ContractViolation, DataFormatError
from rsds.nnet import Mlp
from rsds.rmsm import (
    LOG_FLOOR,
    AutonomousSwitching,
    LatentPath,
    RecurrentSwitching,
    RmsmParams,
    sample_path_with,
)

FORMAT_MAGIC = b"RSDS"
FORMAT_VERSION = 1

REGIMES_FOR_M = {3: 3, 5: 3, 10: 4, 20: 5}
RATIO_THRESHOLD_FOR_M = {3: 0.35, 5: 0.35, 10: 0.10, 20: 0.05}

# bouncing-ball velocity sign patterns, in fixed label order
BALL_MODES = ((1, 1), (-1, 1), (1, -1), (-1, -1))  # NE, NW, SE, SW


@dataclass
class SyntheticSpec:
    m: int = 3
    n_regimes: int | None = None        # default from the m -> K table
    obs_factor: int = 1                 # observation dim n = obs_factor * m
    T: int = 100
    n_train: int = 10000
    n_test: int = 1000
    stay_prob: float = 0.9
    sparsity: int = 3                   # average in-edges per output
    sigma_lo: float = 0.001
    sigma_hi: float = 0.5
    ratio_threshold: float | None = None
    hidden: int = 16
    seed: int = 0
    identity_emission: bool = False     # debug flag: emit latents directly

    def __post_init__(self):
        if self.obs_factor not in (1, 5):
            raise ContractViolation("observation dim must be m or 5m")
        if min(self.T, self.n_train, self.n_test, self.m) < 1:
            raise ContractViolation("counts must be positive")
        if self.n_regimes is None:
            if self.m not in REGIMES_FOR_M:
                raise ContractViolation(
                    f"no default regime count for m={self.m}; set n_regimes")
            self.n_regimes = REGIMES_FOR_M[self.m]
        if self.ratio_threshold is None:
            if self.m not in RATIO_THRESHOLD_FOR_M:
                raise ContractViolation(
                    f"no default ratio threshold for m={self.m}; set one")
            self.ratio_threshold = RATIO_THRESHOLD_FOR_M[self.m]

    @property
    def obs_dim(self):
        return self.obs_factor * self.m

    def metadata(self):
        return {
            "generator": "synthetic",
            "m": str(self.m),
            "K": str(self.n_regimes),
            "n": str(self.obs_dim),
            "T": str(self.T),
            "n_train": str(self.n_train),
            "n_test": str(self.n_test),
            "stay_prob": repr(self.stay_prob),
            "sparsity": str(self.sparsity),
            "sigma_lo": repr(self.sigma_lo),
            "sigma_hi": repr(self.sigma_hi),
            "ratio_threshold": repr(self.ratio_threshold),
            "hidden": str(self.hidden),
            "seed": str(self.seed),
            "identity_emission": str(self.identity_emission),
            "emission_slope": "0.2",
            "format_version": str(FORMAT_VERSION),
        }


@dataclass
class Dataset:
    """Batched sequences with optional ground truth for evaluation."""

    x: np.ndarray                 # (N, T, n)
    z: np.ndarray | None = None   # (N, T, m)
    s: np.ndarray | None = None   # (N, T) 0-based labels
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.ascontiguousarray(self.x, dtype=float)
        if self.x.ndim != 3:
            raise ContractViolation("x must be (N, T, n)")
        if self.z is not None:
            self.z = np.ascontiguousarray(self.z, dtype=float)
            if self.z.shape[:2] != self.x.shape[:2]:
                raise ContractViolation("z shape inconsistent with x")
        if self.s is not None:
            self.s = np.ascontiguousarray(self.s, dtype=np.uint32)
            if self.s.shape != self.x.shape[:2]:
                raise ContractViolation("s shape inconsistent with x")

    @property
    def n_sequences(self):
        return self.x.shape[0]

    def subset(self, lo, hi):
        return Dataset(
            x=self.x[lo:hi],
            z=None if self.z is None else self.z[lo:hi],
            s=None if self.s is None else self.s[lo:hi],
            metadata=dict(self.metadata),
        )


@dataclass
class SyntheticResult:
    train: Dataset
    test: Dataset
    params: RmsmParams
    emission: Mlp | None          # None when emitting latents directly


def _local_masks(m, hidden, sparsity, rng):
    """Masks making each output depend on ~sparsity random inputs.

    Hidden units are split into per-output groups; group h feeds only
    output h and reads only that output's sampled input support.
    """
    hidden = max(hidden, m)
    owners = np.arange(hidden) % m
    mask1 = np.zeros((m, hidden))
    mask2 = np.zeros((hidden, m))
    k_in = min(sparsity, m)
    for out in range(m):
        support = rng.choice(m, size=k_in, replace=False)
        cols = np.flatnonzero(owners == out)
        mask1[np.ix_(support, cols)] = 1.0
        mask2[cols, out] = 1.0
    return mask1, mask2, hidden


def _sticky_cyclic_logits(n_regimes, stay_prob):
    q = np.zeros((n_regimes, n_regimes))
    for k in range(n_regimes):
        q[k, k] = stay_prob
        q[k, (k + 1) % n_regimes] = 1.0 - stay_prob
    with np.errstate(divide="ignore"):
        return np.maximum(np.log(q), LOG_FLOOR)


def _draw_regime_sigmas(spec, rng):
    """U(sigma_lo, sigma_hi) scales, resampled until one regime pair has
    dimension-wise ratios that all differ by more than the threshold."""
    for _ in range(1000):
        sigmas = rng.uniform(spec.sigma_lo, spec.sigma_hi,
                             size=(spec.n_regimes, spec.m))
        best = 0.0
        for a in range(spec.n_regimes):
            for b in range(a + 1, spec.n_regimes):
                r = np.sort(sigmas[a] / sigmas[b])
                spread = np.min(np.diff(r)) if spec.m > 1 else np.inf
                best = max(best, spread)
        if best > spec.ratio_threshold:
            return sigmas
    raise ConfigError(
        f"could not draw regime scales with ratio spread > "
        f"{spec.ratio_threshold} in 1000 tries; loosen the threshold")


def synthetic_ground_truth(spec):
    """The data-generating model and emission net for a SyntheticSpec."""
    param_rng = prng.generator(
        np.random.SeedSequence([spec.seed, 0]).generate_state(1)[0])
    K, m = spec.n_regimes, spec.m
    nets = []
    for _ in range(K):
        mask1, mask2, hidden = _local_masks(m, spec.hidden, spec.sparsity,
                                            param_rng)
        net_seed = int(param_rng.integers(2 ** 62))
        nets.append(Mlp([m, hidden, m], activation="cosine", seed=net_seed,
                        masks=[mask1, mask2]))
    sigmas = _draw_regime_sigmas(spec, param_rng)
    params = RmsmParams(
        n_regimes=K,
        dim=m,
        initial_logits=np.zeros(K),
        initial_means=param_rng.uniform(-1.0, 1.0, size=(K, m)),
        initial_log_sigmas=np.full((K, m), np.log(0.1)),
        transition_nets=nets,
        transition_log_sigmas=np.log(sigmas),
        switching=AutonomousSwitching(
            _sticky_cyclic_logits(K, spec.stay_prob)),
    )
    emission = None
    if not spec.identity_emission:
        n = spec.obs_dim
        emission = Mlp([n, n, n], activation="lrelu",
                       seed=int(param_rng.integers(2 ** 62)))
    return params, emission


def gen_synthetic(spec):
    """Sample the synthetic benchmark; train and test splits share the
    ground-truth model but use disjoint per-sequence streams."""
    params, emission = synthetic_ground_truth(spec)
    total = spec.n_train + spec.n_test
    streams = prng.sequence_streams(spec.seed, total)
    n = spec.obs_dim
    m = spec.m
    x = np.empty((total, spec.T, n))
    z = np.empty((total, spec.T, m))
    s = np.empty((total, spec.T), dtype=np.uint32)
    for i, rng in enumerate(streams):
        path = sample_path_with(params, spec.T, rng)
        z[i] = path.z
        s[i] = path.s
        feats = path.z
        if spec.obs_factor == 5:
            noise = 0.1 * prng.polar_normal(rng, (spec.T, 4 * m))
            feats = np.concatenate([path.z, noise], axis=1)
        if emission is None:
            x[i] = feats
        else:
            x[i], _ = emission.forward(feats)
    meta = spec.metadata()
    train = Dataset(x[:spec.n_train], z[:spec.n_train], s[:spec.n_train],
                    dict(meta, split="train"))
    test = Dataset(x[spec.n_train:], z[spec.n_train:], s[spec.n_train:],
                   dict(meta, split="test"))
    return SyntheticResult(train=train, test=test, params=params,
                           emission=emission)


def cosine_ground_truth(sigma2=0.1, stickiness=0.1, recurrent=False):
    """The K=3, m=1 system with means cos(z), cos(z - pi/2), cos(z + pi/2).

    Phase offsets follow the worked example's aligned-predecessor
    construction (margins 5 at the z=1 endpoint, 0.67 at z=0.5).
    """
    if sigma2 <= 0:
        raise ContractViolation("sigma2 must be positive")
    if not 0 <= stickiness < 1:
        raise ContractViolation("stickiness must be in [0, 1)")
    offsets = (0.0, -np.pi / 2.0, np.pi / 2.0)
    nets = [
        Mlp([1, 1, 1], activation="cosine",
            weights=[np.array([[1.0]]), np.array([[1.0]])],
            biases=[np.array([off]), np.array([0.0])])
        for off in offsets
    ]
    stay = 1.0 - stickiness
    off_mass = stickiness / 2.0
    q = np.full((3, 3), off_mass)
    np.fill_diagonal(q, stay)
    with np.errstate(divide="ignore"):
        logits = np.maximum(np.log(q), LOG_FLOOR)
    if recurrent:
        net = Mlp([1, 4, 9], activation="lrelu", seed=0)
        for w in net.weights:
            w[:] = 0.0
        net.biases[0][:] = 0.0
        net.biases[1][:] = logits.ravel()
        switching = RecurrentSwitching(net)
    else:
        switching = AutonomousSwitching(logits)
    return RmsmParams(
        n_regimes=3,
        dim=1,
        initial_logits=np.zeros(3),
        initial_means=np.zeros((3, 1)),
        initial_log_sigmas=np.zeros((3, 1)),
        transition_nets=nets,
        transition_log_sigmas=np.full((3, 1), 0.5 * np.log(sigma2)),
        switching=switching,
    )


def gen_cosine_toy(sigma2=0.1, T=100, N=100, stickiness=0.1, seed=0,
                   recurrent=False):
    """Sample the cosine toy system; identity emission (x = z)."""
    params = cosine_ground_truth(sigma2, stickiness, recurrent)
    streams = prng.sequence_streams(seed, N)
    z = np.empty((N, T, 1))
    s = np.empty((N, T), dtype=np.uint32)
    for i, rng in enumerate(streams):
        path = sample_path_with(params, T, rng)
        z[i] = path.z
        s[i] = path.s
    meta = {
        "generator": "cosine",
        "m": "1", "K": "3", "n": "1",
        "T": str(T), "N": str(N),
        "sigma2": repr(sigma2),
        "stickiness": repr(stickiness),
        "recurrent": str(recurrent),
        "seed": str(seed),
        "format_version": str(FORMAT_VERSION),
    }
    return Dataset(x=z.copy(), z=z, s=s, metadata=meta), params


def _ball_flip(signs, pos, box, speed):
    """Next velocity signs: flip any component whose move would exit."""
    sx, sy = signs
    if pos[0] + speed * sx > box or pos[0] + speed * sx < 0.0:
        sx = -sx
    if pos[1] + speed * sy > box or pos[1] + speed * sy < 0.0:
        sy = -sy
    return (sx, sy)


def ball_ground_truth(box_size=1.0, speed=0.1, process_noise=0.01):
    """Exact recurrent-switching model of the bouncing ball.

    Transition means are z + speed * mode_k (identity nets with bias).
    The switching net stacks bounded hinge ramps that activate within
    one step of each wall; away from walls only a sticky bias acts, near
    a wall the ramp overwhelms it and flips the matching component.
    """
    if box_size <= 0:
        raise ContractViolation("box_size must be positive")
    K = 4
    nets = []
    eye = np.eye(2)
    for sx, sy in BALL_MODES:
        nets.append(Mlp([2, 2, 2], activation="identity",
                        weights=[eye.copy(), eye.copy()],
                        biases=[np.zeros(2),
                                speed * np.array([sx, sy], dtype=float)]))
    width = speed if speed > 0 else box_size
    beta = 8.0 / width
    gain = 4.0 if speed > 0 else 0.0
    kappa = 2.0
    w1 = np.zeros((2, 8))
    b1 = np.zeros(8)
    for axis in range(2):
        base = 4 * axis
        w1[axis, base + 0] = beta           # hinge above the far wall
        b1[base + 0] = -beta * (box_size - width)
        w1[axis, base + 1] = beta
        b1[base + 1] = -beta * box_size
        w1[axis, base + 2] = -beta          # hinge below the near wall
        b1[base + 2] = beta * width
        w1[axis, base + 3] = -beta
        b1[base + 3] = 0.0
    w2 = np.zeros((8, K * K))
    b2 = np.zeros(K * K)
    for j, (sxj, syj) in enumerate(BALL_MODES):
        for k, (txk, tyk) in enumerate(BALL_MODES):
            o = j * K + k
            for axis, t in ((0, txk), (1, tyk)):
                base = 4 * axis
                w2[base + 0, o] = -gain * t
                w2[base + 1, o] = +gain * t
                w2[base + 2, o] = +gain * t
                w2[base + 3, o] = -gain * t
            b2[o] = kappa * (txk * sxj + tyk * syj)
    q_net = Mlp([2, 8, K * K], activation="lrelu",
                weights=[w1, w2], biases=[b1, b2])
    sigma = max(process_noise, 1e-4)
    return RmsmParams(
        n_regimes=K,
        dim=2,
        initial_logits=np.zeros(K),
        initial_means=np.full((K, 2), box_size / 2.0),
        initial_log_sigmas=np.full((K, 2), np.log(box_size / 4.0)),
        transition_nets=nets,
        transition_log_sigmas=np.full((K, 2), np.log(sigma)),
        switching=RecurrentSwitching(q_net),
    )


def _reflect(value, box):
    # fold back into [0, box]; at most a few bounces for sane noise
    while value < 0.0 or value > box:
        if value < 0.0:
            value = -value
        if value > box:
            value = 2.0 * box - value
    return value


def gen_bouncing_ball_state(box_size=1.0, speed=0.1, T=64, N=1000,
                            process_noise=0.01, seed=0, emit_net=False,
                            start=None, start_mode=None):
    """Simulate the state-space bouncing ball.

    Positions are observed directly (m = n = 2) unless emit_net passes
    them through a seeded two-layer leaky-rectifier net. ``start`` and
    ``start_mode`` pin the initial condition (used by deterministic
    tests); otherwise starts are uniform inside the box with a
    wall margin, modes uniform.
    """
    params = ball_ground_truth(box_size, speed, process_noise)
    streams = prng.sequence_streams(seed, N)
    z = np.empty((N, T, 2))
    s = np.empty((N, T), dtype=np.uint32)
    margin = min(2.0 * speed, box_size / 4.0) if speed > 0 else box_size / 4.0
    for i, rng in enumerate(streams):
        if start is None:
            pos = rng.uniform(margin, box_size - margin, size=2)
        else:
            pos = np.asarray(start, dtype=float).copy()
        mode = int(rng.integers(4)) if start_mode is None else int(start_mode)
        z[i, 0] = pos
        s[i, 0] = mode
        signs = BALL_MODES[mode]
        for t in range(1, T):
            signs = _ball_flip(signs, pos, box_size, speed)
            mode = BALL_MODES.index(signs)
            step = speed * np.array(signs, dtype=float)
            if process_noise > 0:
                step = step + process_noise * prng.polar_normal(rng, (2,))
            pos = np.array([_reflect(pos[0] + step[0], box_size),
                            _reflect(pos[1] + step[1], box_size)])
            z[i, t] = pos
            s[i, t] = mode
    emission = None
    if emit_net:
        emission = Mlp([2, 2, 2], activation="lrelu", seed=seed + 7919)
        x = emission.forward(z.reshape(N * T, 2))[0].reshape(N, T, 2)
    else:
        x = z.copy()
    meta = {
        "generator": "bouncing_ball",
        "m": "2", "K": "4", "n": "2",
        "T": str(T), "N": str(N),
        "box_size": repr(box_size),
        "speed": repr(speed),
        "process_noise": repr(process_noise),
        "emit_net": str(emit_net),
        "seed": str(seed),
        "format_version": str(FORMAT_VERSION),
    }
    return Dataset(x=x, z=z, s=s, metadata=meta), params


def make_history(z, s):
    """Convenience: a LatentPath from arrays."""
    return LatentPath(z=np.asarray(z, dtype=float).reshape(len(s), -1),
                      s=np.asarray(s, dtype=int))


# --------------------------------------------------------------------------
# dataset file format


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, count, what):
        if self.pos + count > len(self.data):
            raise DataFormatError(f"truncated file: missing {what}", self.pos)
        out = self.data[self.pos:self.pos + count]
        self.pos += count
        return out

    def unpack(self, fmt, what):
        return struct.unpack("<" + fmt, self.take(struct.calcsize(fmt), what))


def _encode_metadata(metadata):
    lines = []
    for key, value in metadata.items():
        if "=" in key or "\n" in key or "\n" in str(value):
            raise ContractViolation(f"metadata key/value not encodable: {key}")
        lines.append(f"{key}={value}")
    return ("\n".join(lines) + "\n").encode("utf-8") if lines else b""


def _decode_metadata(blob):
    meta = {}
    for line in blob.decode("utf-8").splitlines():
        if not line:
            continue
        key, _, value = line.partition("=")
        meta[key] = value
    return meta


def write_dataset(path, dataset, sidecar=True):
    """Write the RSDS binary file (and a plain-text metadata sidecar)."""
    path = str(path)
    N, T, n = dataset.x.shape
    m = dataset.z.shape[2] if dataset.z is not None else 0
    K = int(dataset.metadata.get("K", 0))
    flags = (1 if dataset.z is not None else 0) | \
            (2 if dataset.s is not None else 0)
    meta_blob = _encode_metadata(dataset.metadata)
    with open(path, "wb") as fh:
        fh.write(FORMAT_MAGIC)
        fh.write(struct.pack("<HB", FORMAT_VERSION, flags))
        fh.write(struct.pack("<5I", N, T, n, m, K))
        fh.write(np.ascontiguousarray(dataset.x, dtype="<f8").tobytes())
        if dataset.z is not None:
            fh.write(np.ascontiguousarray(dataset.z, dtype="<f8").tobytes())
        if dataset.s is not None:
            fh.write(np.ascontiguousarray(dataset.s, dtype="<u4").tobytes())
        fh.write(struct.pack("<I", len(meta_blob)))
        fh.write(meta_blob)
    if sidecar:
        with open(path + ".txt", "w", encoding="utf-8") as fh:
            fh.write(meta_blob.decode("utf-8"))


def read_dataset_header(path):
    """Shapes and flags without loading payloads.

    Returns a dict with N, T, n, m, K, has_z, has_s, version.
    """
    with open(str(path), "rb") as fh:
        head = fh.read(4 + 3 + 20)
    reader = _Reader(head)
    magic = reader.take(4, "magic")
    if magic != FORMAT_MAGIC:
        raise DataFormatError(f"bad magic {magic!r}", 0)
    version, flags = reader.unpack("HB", "version/flags")
    if version != FORMAT_VERSION:
        raise DataFormatError(f"unsupported version {version}", 4)
    N, T, n, m, K = reader.unpack("5I", "dimensions")
    return {"N": N, "T": T, "n": n, "m": m, "K": K,
            "has_z": bool(flags & 1), "has_s": bool(flags & 2),
            "version": version}


def read_dataset(path):
    """Read an RSDS file back into a Dataset (bit-exact round trip)."""
    with open(str(path), "rb") as fh:
        blob = fh.read()
    reader = _Reader(blob)
    magic = reader.take(4, "magic")
    if magic != FORMAT_MAGIC:
        raise DataFormatError(f"bad magic {magic!r}", 0)
    version, flags = reader.unpack("HB", "version/flags")
    if version != FORMAT_VERSION:
        raise DataFormatError(f"unsupported version {version}", 4)
    N, T, n, m, K = reader.unpack("5I", "dimensions")
    x = np.frombuffer(reader.take(8 * N * T * n, "observations"),
                      dtype="<f8").reshape(N, T, n).copy()
    z = None
    if flags & 1:
        z = np.frombuffer(reader.take(8 * N * T * m, "latents"),
                          dtype="<f8").reshape(N, T, m).copy()
    s = None
    if flags & 2:
        s = np.frombuffer(reader.take(4 * N * T, "regimes"),
                          dtype="<u4").reshape(N, T).copy()
        if K and s.max(initial=0) >= K:
            raise DataFormatError("regime label out of range", reader.pos)
    (meta_len,) = reader.unpack("I", "metadata length")
    meta = _decode_metadata(reader.take(meta_len, "metadata"))
    return Dataset(x=x, z=z, s=s, metadata=meta)
