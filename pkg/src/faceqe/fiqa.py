"""Two-level learning-to-rank face image quality model.

Level 1: one linear RankSVM per descriptor kind (hog, gabor, gist, lbp and,
when embeddings are supplied, an external/CNN slot). Level 2: the vector of
standardised level-1 scores is expanded by an explicit degree-5 monomial map
and ranked again by a linear RankSVM. The level-2 output is mapped affinely
onto [0, 100] between the 1st and 99th percentile of its training values and
rounded; scores then split into low (<30), middle (30..59) and high (>=60).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ImageIOError, NumericError, ValidationError
from .features import FeatureVector

MODEL_MAGIC = "faceqe-fiqa-model"
MODEL_VERSION = 1

LEVEL1_KINDS = ("hog", "gabor", "gist", "lbp", "external")
POLY_DEGREE = 5
MAX_PAIRS = 50_000
DEFAULT_LAMBDA = 1e-3
DEFAULT_ITERS = 500

LOW_MAX = 30   # s < 30 -> low
HIGH_MIN = 60  # s >= 60 -> high
CATEGORIES = ("low", "middle", "high")


@dataclass(frozen=True)
class RankPair:
    higher: str
    lower: str

    def __post_init__(self) -> None:
        if self.higher == self.lower:
            raise ValidationError(f"rank pair compares {self.higher!r} with itself")


@dataclass
class LinearRanker:
    weights: np.ndarray
    feature_kind: str = "generic"

    def score(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.weights.size:
            raise ValidationError(f"{self.feature_kind} ranker expects dim {self.weights.size}, got {x.shape[-1]}")
        return x @ self.weights


def _vec(v: FeatureVector | np.ndarray) -> np.ndarray:
    return v.values if isinstance(v, FeatureVector) else np.asarray(v, dtype=np.float64)


def ranksvm_objective(w: np.ndarray, diffs: np.ndarray, reg_lambda: float) -> float:
    hinge = np.maximum(0.0, 1.0 - diffs @ w)
    return 0.5 * reg_lambda * float(w @ w) + float(hinge.mean())


def _pair_design(pairs: Sequence[RankPair], features: Mapping[str, FeatureVector | np.ndarray]):
    if not pairs:
        raise ValidationError("RankSVM needs at least one pair")
    index: dict[str, int] = {}
    for p in pairs:
        for rid in (p.higher, p.lower):
            if rid not in index:
                if rid not in features:
                    raise ValidationError(f"no features for record {rid!r}")
                index[rid] = len(index)
    x = np.stack([_vec(features[rid]) for rid in index])
    hi = np.array([index[p.higher] for p in pairs], dtype=np.intp)
    lo = np.array([index[p.lower] for p in pairs], dtype=np.intp)
    return x, hi, lo


def train_ranksvm(pairs: Sequence[RankPair], features: Mapping[str, FeatureVector | np.ndarray],
                  kind: str = "generic", reg_lambda: float = DEFAULT_LAMBDA,
                  iters: int = DEFAULT_ITERS, trace: list | None = None) -> LinearRanker:
    """Minimise (lambda/2)|w|^2 + mean_pairs max(0, 1 - w.(x_hi - x_lo)).

    Full-batch subgradient steps of size 1/(lambda t), projected onto the
    ball of radius 1/sqrt(lambda) that contains the optimum; the returned
    weights are the running average of the iterates. Pairs are visited in
    the given order, so results are reproducible bit for bit. When
    ``trace`` is a list, ``(t, averaged_weights)`` is appended every 50 steps.
    """
    if reg_lambda <= 0:
        raise ValidationError("reg_lambda must be positive")
    if iters < 1:
        raise ValidationError("iters must be >= 1")
    x, hi, lo = _pair_design(pairs, features)
    n, d = x.shape
    npairs = len(hi)
    w = np.zeros(d)
    avg = np.zeros(d)
    radius = 1.0 / math.sqrt(reg_lambda)
    for t in range(1, iters + 1):
        s = x @ w
        active = (s[hi] - s[lo]) < 1.0
        c = (np.bincount(hi[active], minlength=n) - np.bincount(lo[active], minlength=n)).astype(np.float64)
        grad = reg_lambda * w - (x.T @ c) / npairs
        w = w - grad / (reg_lambda * t)
        norm = float(np.linalg.norm(w))
        if norm > radius:
            w *= radius / norm
        avg += (w - avg) / t
        if trace is not None and t % 50 == 0:
            trace.append((t, avg.copy()))
    return LinearRanker(avg, kind)


def pairwise_accuracy(scores: Mapping[str, float], pairs: Sequence[RankPair]) -> float:
    if not pairs:
        raise ValidationError("no pairs to evaluate")
    return sum(scores[p.higher] > scores[p.lower] for p in pairs) / len(pairs)


def make_pairs(labels: Mapping[str, int], max_pairs: int = MAX_PAIRS, seed: int = 0) -> list[RankPair]:
    """All cross-class (higher label, lower label) pairs, subsampled to ``max_pairs``."""
    ids = sorted(labels)
    classes = sorted({labels[i] for i in ids})
    if len(classes) < 2:
        raise ValidationError("ranking needs at least two ordinal classes")
    by_class = {c: [i for i in ids if labels[i] == c] for c in classes}
    pairs = [RankPair(h, l)
             for ch, cl in itertools.combinations(reversed(classes), 2)
             for h in by_class[ch] for l in by_class[cl]]
    if len(pairs) > max_pairs:
        rng = np.random.default_rng(seed)
        keep = np.sort(rng.choice(len(pairs), size=max_pairs, replace=False))
        pairs = [pairs[i] for i in keep]
    return pairs


def monomial_exponents(n_vars: int, degree: int = POLY_DEGREE) -> list[tuple[int, ...]]:
    """Exponent tuples of all monomials of total degree 0..degree, graded-lex order."""
    out = []
    for total in range(degree + 1):
        combos = [e for e in itertools.product(range(total, -1, -1), repeat=n_vars) if sum(e) == total]
        out.extend(sorted(combos, reverse=True))
    return out


_EXPONENTS: dict[int, np.ndarray] = {}


def poly5_map(scores: Sequence[float]) -> np.ndarray:
    """Explicit degree-5 polynomial feature map; first entry is the constant 1.

    With 5 inputs the output has C(10, 5) = 252 entries.
    """
    x = np.asarray(scores, dtype=np.float64)
    if x.ndim != 1 or x.size < 1:
        raise ValidationError("poly5_map needs a flat vector of level-1 scores")
    if not np.all(np.isfinite(x)):
        raise ValidationError("poly5_map input must be finite")
    exps = _EXPONENTS.get(x.size)
    if exps is None:
        exps = _EXPONENTS[x.size] = np.array(monomial_exponents(x.size), dtype=np.intp)
    return np.prod(x[None, :] ** exps, axis=1)


def poly_dim(n_vars: int, degree: int = POLY_DEGREE) -> int:
    return math.comb(n_vars + degree, degree)


def round_half_away(x: float) -> int:
    return int(math.copysign(math.floor(abs(x) + 0.5), x))


@dataclass
class QualityModel:
    kinds: tuple[str, ...]
    level1: list[LinearRanker]
    l1_mean: np.ndarray
    l1_std: np.ndarray
    level2: LinearRanker
    score_min: float
    score_max: float
    seed: int = 0
    reg_lambda: float = DEFAULT_LAMBDA
    iters: int = DEFAULT_ITERS
    notes: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.score_min < self.score_max:
            raise NumericError("quality model needs score_min < score_max")
        if self.level2.weights.size != poly_dim(len(self.kinds)):
            raise ValidationError("level-2 weight dimension does not match the monomial map")

    def level1_scores(self, feats: Mapping[str, FeatureVector | np.ndarray]) -> np.ndarray:
        vals = []
        for kind, ranker in zip(self.kinds, self.level1):
            if kind not in feats:
                raise ValidationError(f"missing {kind} features")
            vals.append(float(ranker.score(_vec(feats[kind]))))
        return (np.array(vals) - self.l1_mean) / self.l1_std

    def raw_score(self, feats: Mapping[str, FeatureVector | np.ndarray]) -> float:
        return float(self.level2.score(poly5_map(self.level1_scores(feats))))

    def normalize(self, raw: float) -> float:
        frac = (raw - self.score_min) / (self.score_max - self.score_min)
        return min(max(frac, 0.0), 1.0) * 100.0


def score_from_raw(model: QualityModel, raw: float) -> int:
    return round_half_away(model.normalize(raw))


def predict_quality(model: QualityModel, feats: Mapping[str, FeatureVector | np.ndarray]) -> int:
    return score_from_raw(model, model.raw_score(feats))


def train_quality_model(labels: Mapping[str, int],
                        features: Mapping[str, Mapping[str, FeatureVector | np.ndarray]], *,
                        reg_lambda: float = DEFAULT_LAMBDA, iters: int = DEFAULT_ITERS, seed: int = 0,
                        max_pairs: int = MAX_PAIRS, fill_external_with_gist: bool = False) -> QualityModel:
    """Train both levels on pairs induced by ordinal ``labels`` (larger = better quality).

    ``features`` maps kind -> record_id -> vector. Without an ``external``
    table the model uses four level-1 rankers, unless
    ``fill_external_with_gist`` asks for the gist table to stand in.
    """
    features = dict(features)
    notes = {}
    if "external" not in features and fill_external_with_gist and "gist" in features:
        features["external"] = features["gist"]
        notes["external_slot"] = "gist"
    kinds = tuple(k for k in LEVEL1_KINDS if k in features)
    required = [k for k in LEVEL1_KINDS[:4] if k not in features]
    if required:
        raise ValidationError(f"missing feature kinds {required}")
    notes.setdefault("external_slot", "external" if "external" in kinds else "absent")
    ids = sorted(labels)
    for kind in kinds:
        absent = [i for i in ids if i not in features[kind]]
        if absent:
            raise ValidationError(f"{kind} features missing for {len(absent)} records, e.g. {absent[0]!r}")
    pairs = make_pairs(labels, max_pairs, seed)
    level1 = [train_ranksvm(pairs, features[k], k, reg_lambda, iters) for k in kinds]
    raw1 = np.array([[float(r.score(_vec(features[k][i]))) for k, r in zip(kinds, level1)] for i in ids])
    mean = raw1.mean(axis=0)
    std = raw1.std(axis=0)
    std[std <= 1e-12] = 1.0
    z = (raw1 - mean) / std
    mapped = np.stack([poly5_map(row) for row in z])
    col_scale = mapped.std(axis=0)
    col_scale[col_scale <= 1e-12] = 1.0
    mapped_feats = {i: mapped[n] / col_scale for n, i in enumerate(ids)}
    level2_scaled = train_ranksvm(pairs, mapped_feats, "poly5", reg_lambda, iters)
    level2 = LinearRanker(level2_scaled.weights / col_scale, "poly5")
    raw2 = mapped @ level2.weights
    lo, hi = np.percentile(raw2, [1.0, 99.0])
    if not hi > lo:
        raise NumericError("level-2 training scores are constant; cannot normalise")
    return QualityModel(kinds, level1, mean, std, level2, float(lo), float(hi),
                        seed=seed, reg_lambda=reg_lambda, iters=iters, notes=notes)


def categorize(score: int) -> str:
    if score < LOW_MAX:
        return "low"
    if score < HIGH_MIN:
        return "middle"
    return "high"


def partition(scores: Mapping[str, int]) -> dict[str, list[str]]:
    out: dict[str, list[str]] = {c: [] for c in CATEGORIES}
    for rid, s in scores.items():
        if not 0 <= s <= 100:
            raise ValidationError(f"score {s} for {rid!r} outside [0, 100]")
        out[categorize(s)].append(rid)
    return out


# --- serialisation -------------------------------------------------------------

def _floats(v: np.ndarray) -> str:
    return ",".join(map(repr, np.asarray(v, dtype=np.float64).tolist()))


def _parse_floats(s: str) -> np.ndarray:
    return np.array([float(t) for t in s.split(",")]) if s else np.zeros(0)


def model_text(m: QualityModel) -> str:
    lines = [
        f"{MODEL_MAGIC} {MODEL_VERSION}",
        "kinds " + ",".join(m.kinds),
        f"poly_degree {POLY_DEGREE}",
        f"level2_dim {m.level2.weights.size}",
        f"seed {m.seed}",
        f"reg_lambda {m.reg_lambda!r}",
        f"iters {m.iters}",
        f"score_min {m.score_min!r}",
        f"score_max {m.score_max!r}",
        "l1_mean " + _floats(m.l1_mean),
        "l1_std " + _floats(m.l1_std),
    ]
    lines += [f"note {k} {v}" for k, v in sorted(m.notes.items())]
    for kind, r in zip(m.kinds, m.level1):
        lines.append(f"level1 {kind} {r.weights.size}")
        lines.append(_floats(r.weights))
    lines.append(f"level2 poly5 {m.level2.weights.size}")
    lines.append(_floats(m.level2.weights))
    return "\n".join(lines) + "\n"


def save_model(m: QualityModel, path: str | Path) -> None:
    try:
        Path(path).write_text(model_text(m), encoding="utf-8")
    except OSError as exc:
        raise ImageIOError(f"{path}: cannot write model ({exc})") from exc


def parse_model(text: str) -> QualityModel:
    lines = text.splitlines()
    if not lines or lines[0].split()[:1] != [MODEL_MAGIC]:
        raise ValidationError("not a quality model file")
    version = int(lines[0].split()[1])
    if version != MODEL_VERSION:
        raise ValidationError(f"unsupported model version {version}")
    head: dict[str, str] = {}
    notes: dict[str, str] = {}
    weights: list[tuple[str, np.ndarray]] = []
    i = 1
    while i < len(lines):
        key, _, rest = lines[i].partition(" ")
        if key in ("level1", "level2"):
            kind, dim = rest.split()
            w = _parse_floats(lines[i + 1])
            if w.size != int(dim):
                raise ValidationError(f"{key} {kind}: expected {dim} weights, found {w.size}")
            weights.append((kind, w))
            i += 2
            continue
        if key == "note":
            k, _, v = rest.partition(" ")
            notes[k] = v
        else:
            head[key] = rest
        i += 1
    kinds = tuple(head["kinds"].split(","))
    if len(weights) != len(kinds) + 1:
        raise ValidationError("model file has the wrong number of weight rows")
    level1 = [LinearRanker(w, k) for k, w in weights[:-1]]
    return QualityModel(kinds, level1, _parse_floats(head["l1_mean"]), _parse_floats(head["l1_std"]),
                        LinearRanker(weights[-1][1], "poly5"), float(head["score_min"]),
                        float(head["score_max"]), seed=int(head["seed"]),
                        reg_lambda=float(head["reg_lambda"]), iters=int(head["iters"]), notes=notes)


def load_model(path: str | Path) -> QualityModel:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ImageIOError(f"{path}: cannot read model ({exc})") from exc
    return parse_model(text)
