"""Evaluation battery: k-way top-m retrieval, forward/backward cross-modal
retrieval in a concept space, representational similarity analysis, and 2-D
embedding map export for cluster plots.

Everything here is pure numpy/scikit-learn over embedding matrices; model
inference happens upstream.  Retrieval consumes raw projector outputs only:
this module performs no embedding refinement of any kind.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.manifold import MDS, TSNE

from .data import concept_of
from .errors import (ConfigurationError, NormalizationError, NumericsError,
                     ValidationError)

MAP_METHODS = ("mds-init-tsne", "mds")


def _unit_rows(x: np.ndarray, what: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValidationError(f"{what} must be a 2-D matrix, got shape {x.shape}")
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if (norms <= 1e-12).any():
        raise NormalizationError(f"{what} contains a zero-norm row")
    return x / norms


def _check_pairing(queries: np.ndarray, candidates: np.ndarray,
                   true_indices) -> np.ndarray:
    if queries.shape[1] != candidates.shape[1]:
        raise ValidationError(
            f"embedding dims differ: queries {queries.shape[1]}, "
            f"candidates {candidates.shape[1]}"
        )
    n, k = queries.shape[0], candidates.shape[0]
    if true_indices is None:
        if n != k:
            raise ValidationError(
                "true_indices required when queries and candidates are not "
                "row-aligned"
            )
        return np.arange(n)
    idx = np.asarray(true_indices, dtype=int)
    if idx.shape != (n,):
        raise ValidationError(f"true_indices must have shape ({n},)")
    if (idx < 0).any() or (idx >= k).any():
        raise ValidationError("true_indices out of candidate range")
    return idx


def _kway_multi(queries: np.ndarray, candidates: np.ndarray, true_indices,
                ways: int, tops: tuple[int, ...], trials: int,
                seed: int) -> dict[int, float]:
    """Shared k-way engine; one accuracy per requested top count.

    Per-query RNG streams are counter-based (seeded by [seed, query index]),
    so results are independent of query evaluation order and all top counts
    score the very same distractor draws.
    """
    q = _unit_rows(queries, "queries")
    c = _unit_rows(candidates, "candidates")
    idx = _check_pairing(q, c, true_indices)
    k = c.shape[0]
    if ways < 2:
        raise ConfigurationError("ways must be >= 2")
    if ways > k:
        raise ConfigurationError(f"ways {ways} exceeds candidate count {k}")
    if trials < 1:
        raise ConfigurationError("trials must be >= 1")
    for top in tops:
        if not 1 <= top <= ways:
            raise ConfigurationError(f"top {top} must lie in [1, ways]")

    sims = q @ c.T
    hits = {top: 0 for top in tops}
    exhaustive = ways == k
    for qi in range(q.shape[0]):
        true = idx[qi]
        s_true = sims[qi, true]
        if exhaustive:
            # all distractors participate; sampling is a no-op
            rank = int((np.delete(sims[qi], true) > s_true).sum())
            for top in tops:
                hits[top] += trials * (rank < top)
            continue
        others = np.delete(np.arange(k), true)
        rng = np.random.default_rng([seed, qi])
        for _ in range(trials):
            drawn = rng.choice(others, size=ways - 1, replace=False)
            rank = int((sims[qi, drawn] > s_true).sum())
            for top in tops:
                hits[top] += rank < top
    total = q.shape[0] * trials
    return {top: hits[top] / total for top in tops}


def kway_retrieval(queries: np.ndarray, candidates: np.ndarray,
                   true_indices=None, *, ways: int, top: int = 1,
                   trials: int = 1, seed: int = 0) -> float:
    """k-way top-m retrieval accuracy.

    Per query and trial, ``ways - 1`` distractors are drawn uniformly without
    replacement (the true paired candidate always participates); candidates
    are ranked by cosine similarity and a strictly-greater rank rule scores a
    hit when the true candidate sits within the top ``top``.  With
    ``ways == len(candidates)`` this reduces to exhaustive retrieval.
    """
    return _kway_multi(queries, candidates, true_indices, ways, (top,),
                       trials, seed)[top]


@dataclass
class RetrievalReport:
    """Accuracies over the Table-style way counts for one query set.

    ``accuracies`` maps (ways, top) to accuracy; K_max is the candidate-set
    size, evaluated exhaustively (sub-K_max counts resample distractors
    ``trials`` times per query).
    """

    accuracies: dict[tuple[int, int], float]
    k_max: int
    n_queries: int
    trials: int
    seed: int

    def __post_init__(self):
        for (ways, top), acc in self.accuracies.items():
            if not 0.0 <= acc <= 1.0:
                raise ValidationError(f"accuracy {acc} for ({ways},{top}) out of [0,1]")

    def to_dict(self) -> dict:
        return {
            "k_max": self.k_max,
            "n_queries": self.n_queries,
            "trials": self.trials,
            "seed": self.seed,
            "accuracies": [
                {"ways": ways, "top": top, "accuracy": acc}
                for (ways, top), acc in sorted(self.accuracies.items())
            ],
        }


def retrieval_report(queries: np.ndarray, candidates: np.ndarray,
                     true_indices=None, trials: int = 50,
                     seed: int = 0) -> RetrievalReport:
    """Retrieval accuracies at way counts {2, 4, 10, K_max} top-1 plus
    K_max-way top-5 (way counts above the candidate-set size are skipped)."""
    k = np.asarray(candidates).shape[0]
    accuracies: dict[tuple[int, int], float] = {}
    for ways in sorted({w for w in (2, 4, 10, k) if 2 <= w <= k}):
        tops = (1, 5) if (ways == k and k >= 5) else (1,)
        per_trials = 1 if ways == k else trials
        result = _kway_multi(queries, candidates, true_indices, ways, tops,
                             per_trials, seed)
        for top, acc in result.items():
            accuracies[(ways, top)] = acc
    return RetrievalReport(accuracies=accuracies, k_max=k,
                           n_queries=np.asarray(queries).shape[0],
                           trials=trials, seed=seed)


def render_retrieval_table(reports: dict[str, RetrievalReport]) -> str:
    """Fixed-width text table, one row per modality, way counts as columns."""
    if not reports:
        raise ValidationError("no reports to render")
    keys = sorted({key for r in reports.values() for key in r.accuracies})
    headers = ["modality"] + [
        f"{ways}-way" + (f" top-{top}" if top != 1 else "") for ways, top in keys
    ]
    rows = [headers]
    for name, report in sorted(reports.items()):
        row = [name]
        for key in keys:
            acc = report.accuracies.get(key)
            row.append("-" if acc is None else f"{acc:.4f}")
        rows.append(row)
    widths = [max(len(r[i]) for r in rows) for i in range(len(headers))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip()
             for row in rows]
    return "\n".join(lines)


def forward_backward_retrieval(modal_a: np.ndarray,
                               modal_b: np.ndarray) -> tuple[float, float]:
    """Exhaustive top-1 retrieval in both directions over matched objects.

    Row i of each matrix is the same object; a query hits when no other row
    scores a strictly greater cosine similarity.
    """
    a = _unit_rows(modal_a, "modal_a")
    b = _unit_rows(modal_b, "modal_b")
    if a.shape[0] != b.shape[0]:
        raise ValidationError(
            f"object sets differ: {a.shape[0]} vs {b.shape[0]} rows"
        )
    sims = a @ b.T
    diag = np.diag(sims)
    forward = float(((sims > diag[:, None]).sum(axis=1) == 0).mean())
    backward = float(((sims.T > diag[:, None]).sum(axis=1) == 0).mean())
    return forward, backward


@dataclass
class ConceptSpace:
    """User-supplied linear map from embedding space into an interpretable
    concept basis (paper-scale: 42 dimensions)."""

    projection: np.ndarray

    def __post_init__(self):
        self.projection = np.asarray(self.projection, dtype=np.float64)
        if self.projection.ndim != 2:
            raise ValidationError("projection must be a 2-D matrix (F, M)")

    @classmethod
    def identity(cls, dim: int) -> "ConceptSpace":
        return cls(np.eye(dim))

    def transform(self, embeddings: np.ndarray) -> np.ndarray:
        x = np.asarray(embeddings, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.projection.shape[0]:
            raise ValidationError(
                f"embeddings of dim {x.shape[-1] if x.ndim == 2 else '?'} do not "
                f"match projection input dim {self.projection.shape[0]}"
            )
        return x @ self.projection


def collapse_by_stimulus(z: np.ndarray, stimulus_ids) -> tuple[list[str], np.ndarray]:
    """Average rows sharing a stimulus id; rows return sorted by id."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] != len(stimulus_ids):
        raise ValidationError("z rows must align with stimulus_ids")
    order = sorted(set(stimulus_ids))
    means = np.stack([
        z[[i for i, s in enumerate(stimulus_ids) if s == stim]].mean(axis=0)
        for stim in order
    ])
    return order, means


@dataclass
class RSMReport:
    """Representational similarity matrices plus their correlation."""

    rsm_pred: np.ndarray
    rsm_measured: np.ndarray
    pearson_r: float
    permutation_p: float
    n_permutations: int
    seed: int

    def summary(self) -> dict:
        return {
            "n_objects": int(self.rsm_pred.shape[0]),
            "pearson_r": self.pearson_r,
            "permutation_p": self.permutation_p,
            "n_permutations": self.n_permutations,
            "seed": self.seed,
        }


def _cosine_rsm(embeddings: np.ndarray, what: str) -> np.ndarray:
    u = _unit_rows(embeddings, what)
    rsm = u @ u.T
    rsm = (rsm + rsm.T) / 2.0
    np.fill_diagonal(rsm, 1.0)
    return rsm


def _upper(rsm: np.ndarray) -> np.ndarray:
    return rsm[np.triu_indices_from(rsm, k=1)]


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    if np.array_equal(x, y):
        # bit-identical vectors correlate perfectly; returning the exact
        # constant avoids sqrt round-off at the r = 1 boundary
        return 1.0
    if x.std() == 0.0 or y.std() == 0.0:
        raise NumericsError("degenerate similarity structure: zero variance")
    return float(np.corrcoef(x, y)[0, 1])


def rsa(embeddings_pred: np.ndarray, embeddings_measured: np.ndarray,
        n_permutations: int = 1000, seed: int = 0) -> RSMReport:
    """Representational similarity analysis between two embedding sets over
    the same ordered objects.

    Similarity matrices use cosine similarity; agreement is Pearson r over
    the vectorized upper triangles (diagonal excluded).  The permutation
    p-value shuffles object labels of the predicted set.
    """
    pred = np.asarray(embeddings_pred, dtype=np.float64)
    measured = np.asarray(embeddings_measured, dtype=np.float64)
    if pred.ndim != 2 or measured.ndim != 2 or pred.shape[0] != measured.shape[0]:
        raise ValidationError("embedding sets must be 2-D with matching row counts")
    n = pred.shape[0]
    if n < 3:
        raise ValidationError("rsa needs at least 3 objects")
    if n_permutations < 1:
        raise ConfigurationError("n_permutations must be >= 1")
    rsm_pred = _cosine_rsm(pred, "embeddings_pred")
    rsm_measured = _cosine_rsm(measured, "embeddings_measured")
    observed = _pearson(_upper(rsm_pred), _upper(rsm_measured))

    rng = np.random.default_rng(seed)
    flat_measured = _upper(rsm_measured)
    exceed = 0
    for _ in range(n_permutations):
        perm = rng.permutation(n)
        shuffled = rsm_pred[np.ix_(perm, perm)]
        if _pearson(_upper(shuffled), flat_measured) >= observed:
            exceed += 1
    p = (1 + exceed) / (1 + n_permutations)
    return RSMReport(rsm_pred=rsm_pred, rsm_measured=rsm_measured,
                     pearson_r=observed, permutation_p=p,
                     n_permutations=n_permutations, seed=seed)


def export_embedding_map(embeddings: np.ndarray, object_ids, concepts=None,
                         method: str = "mds-init-tsne", seed: int = 0,
                         out_path: str | Path | None = None) -> np.ndarray:
    """Project embeddings to 2-D for cluster plots and optionally write a
    tab-separated {object_id, concept, x, y} file.

    ``mds-init-tsne`` seeds t-SNE with classical-stress MDS coordinates;
    ``mds`` stops after the MDS step.  Deterministic given the seed.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2:
        raise ValidationError("embeddings must be a 2-D matrix")
    n = x.shape[0]
    if n < 10:
        raise ValidationError("map export needs at least 10 objects")
    if method not in MAP_METHODS:
        raise ConfigurationError(f"method must be one of {MAP_METHODS}")
    if len(object_ids) != n:
        raise ValidationError("object_ids must align with embedding rows")
    if np.allclose(x, x[0], atol=1e-12):
        raise ValidationError("degenerate embeddings: all rows identical")
    if concepts is None:
        concepts = [concept_of(oid) for oid in object_ids]
    if len(concepts) != n:
        raise ValidationError("concepts must align with embedding rows")

    mds = MDS(n_components=2, n_init=4, random_state=seed,
              normalized_stress="auto")
    coords = mds.fit_transform(x)
    if method == "mds-init-tsne":
        perplexity = min(30.0, max(2.0, (n - 1) / 3.0))
        tsne = TSNE(n_components=2, init=coords, perplexity=perplexity,
                    random_state=seed)
        coords = tsne.fit_transform(x)
    coords = np.asarray(coords, dtype=np.float64)

    if out_path is not None:
        lines = ["object_id\tconcept\tx\ty"]
        for oid, concept, (cx, cy) in zip(object_ids, concepts, coords):
            lines.append(f"{oid}\t{concept}\t{cx:.10g}\t{cy:.10g}")
        Path(out_path).write_text("\n".join(lines) + "\n")
    return coords
