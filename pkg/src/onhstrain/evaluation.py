"""Dataset splitting, ROC-AUC, the three-task benchmark, and the
with/without-strain ablation.

AUC is the rank statistic with average ranks on ties,
AUC = (R_pos - n_pos (n_pos + 1) / 2) / (n_pos * n_neg), which equals
exhaustive pairwise counting (wins + half ties).  The ablation'
significance comes from an exact paired sign-flip permutation over all
2^n_splits assignments, so p-values are multiples of 1/32 at n = 5.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .cloud import OnhPointCloud, load_cloud_csv
from .net import ModelConfig, TrainConfig, predict_proba, train_model

TASKS = ("nasal_step", "arcuate", "hemifield")


@dataclass
class SampleRecord:
    id: str
    labels: dict[str, int]
    defect_class: str = "none"
    files: dict[str, str] = field(default_factory=dict)


@dataclass
class DatasetManifest:
    seed: int
    samples: list[SampleRecord]
    root: Path | None = None
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        ids = [s.id for s in self.samples]
        if len(set(ids)) != len(ids):
            raise ValueError("sample ids must be unique")

    def ids(self) -> list[str]:
        return [s.id for s in self.samples]

    def record(self, sample_id: str) -> SampleRecord:
        for s in self.samples:
            if s.id == sample_id:
                return s
        raise KeyError(sample_id)

    def attach_cloud(self, sample_id: str, cloud: OnhPointCloud) -> None:
        self._cache[sample_id] = cloud

    def cloud(self, sample_id: str, task: str | None = None) -> OnhPointCloud:
        """The sample's point cloud, labeled for ``task`` when given."""
        if sample_id in self._cache:
            base = self._cache[sample_id]
        else:
            rec = self.record(sample_id)
            if "cloud" not in rec.files:
                raise FileNotFoundError(f"sample {sample_id} has no cloud file yet")
            base = load_cloud_csv(Path(self.root or ".") / rec.files["cloud"])
            self._cache[sample_id] = base
        if task is None:
            return base
        return replace(base, label=self.record(sample_id).labels[task])


def save_manifest(path, manifest: DatasetManifest) -> None:
    payload = {
        "seed": manifest.seed,
        "samples": [
            {"id": s.id, "labels": s.labels, "defect_class": s.defect_class, "files": s.files}
            for s in manifest.samples
        ],
    }
    Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")


def load_manifest(path, check_files: bool = True) -> DatasetManifest:
    path = Path(path)
    payload = json.loads(path.read_text())
    samples = [SampleRecord(**s) for s in payload["samples"]]
    manifest = DatasetManifest(payload["seed"], samples, root=path.parent)
    if check_files:
        for s in samples:
            for kind, rel in s.files.items():
                if not (path.parent / rel).exists():
                    raise FileNotFoundError(f"sample {s.id}: missing {kind} file {rel}")
    return manifest


@dataclass
class RocResult:
    auc: float
    n_pos: int
    n_neg: int
    scores: list[float]
    labels: list[int]

    def __post_init__(self):
        if self.n_pos < 1 or self.n_neg < 1:
            raise ValueError("RocResult needs at least one sample per class")


def stratified_split(
    manifest: DatasetManifest, task: str, train_frac: float = 0.8, seed: int = 0
) -> tuple[list[str], list[str]]:
    """Seeded per-class shuffle into disjoint, exhaustive train/test id lists."""
    rng = np.random.default_rng(seed)
    train, test = [], []
    for cls in (0, 1):
        ids = [s.id for s in manifest.samples if s.labels[task] == cls]
        if len(ids) < 2:
            raise ValueError(f"class {cls} of task {task} has fewer than 2 samples")
        perm = rng.permutation(len(ids))
        n_train = int(round(train_frac * len(ids)))
        n_train = min(max(n_train, 1), len(ids) - 1)  # at least one sample on each side
        train.extend(ids[i] for i in perm[:n_train])
        test.extend(ids[i] for i in perm[n_train:])
    return train, test


def roc_auc(scores, labels) -> RocResult:
    """Rank-based (Mann-Whitney) AUC with average ranks on ties."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be equal-length 1D sequences")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be 0 or 1")
    n_pos = int(labels.sum())
    n_neg = int(labels.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise ValueError("both classes must be present")

    order = np.argsort(scores, kind="stable")
    ranks = np.empty(scores.size, dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0  # average 1-based rank
        i = j + 1
    r_pos = float(ranks[labels == 1].sum())
    auc = (r_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)
    return RocResult(float(auc), n_pos, n_neg, list(map(float, scores)), list(map(int, labels)))


def train_and_score(
    manifest: DatasetManifest,
    task: str,
    mcfg: ModelConfig,
    tcfg: TrainConfig,
    seed: int,
):
    """Split, train, score the test clouds; returns (params, RocResult, split)."""
    train_ids, test_ids = stratified_split(manifest, task, seed=seed)
    train_clouds = [manifest.cloud(i, task) for i in train_ids]
    params, history = train_model(train_clouds, mcfg, tcfg)
    scores = [predict_proba(params, manifest.cloud(i, task)) for i in test_ids]
    labels = [manifest.record(i).labels[task] for i in test_ids]
    result = roc_auc(scores, labels)
    return params, result, (train_ids, test_ids), history


def run_task(
    manifest: DatasetManifest, task: str, mcfg: ModelConfig, tcfg: TrainConfig, seed: int
) -> RocResult:
    """The per-task protocol: 80/20 split, train, sigmoid-score, AUC."""
    _, result, _, _ = train_and_score(manifest, task, mcfg, tcfg, seed)
    return result


def sign_flip_p_value(diffs) -> float:
    """Exact one-sided paired permutation p over all 2^n sign assignments."""
    diffs = np.asarray(diffs, dtype=np.float64)
    observed = diffs.mean()
    count = 0
    total = 2 ** len(diffs)
    for signs in itertools.product((1.0, -1.0), repeat=len(diffs)):
        if float(np.mean(diffs * signs)) >= observed - 1e-15:
            count += 1
    return count / total


@dataclass
class AblationReport:
    task: str
    split_seeds: list[int]
    auc_with: list[float]
    auc_without: list[float]
    mean_with: float
    std_with: float
    mean_without: float
    std_without: float
    mean_diff: float
    p_value: float

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "split_seeds": self.split_seeds,
            "auc_with_strain": self.auc_with,
            "auc_without_strain": self.auc_without,
            "mean_with": self.mean_with,
            "std_with": self.std_with,
            "mean_without": self.mean_without,
            "std_without": self.std_without,
            "mean_diff": self.mean_diff,
            "p_value": self.p_value,
        }


def ablation_study(
    manifest: DatasetManifest,
    task: str,
    mcfg: ModelConfig,
    tcfg: TrainConfig,
    n_splits: int = 5,
    split_seeds: list[int] | None = None,
) -> AblationReport:
    """Train with and without the strain channel on identical splits.

    Arm configs differ only in the strain feature; per-split AUC pairs
    feed the exact sign-flip permutation test.
    """
    seeds = list(split_seeds) if split_seeds is not None else list(range(1, n_splits + 1))
    mcfg_with = replace(mcfg, in_features=10)
    mcfg_without = replace(mcfg, in_features=9)
    tcfg_with = replace(tcfg, use_strain=True)
    tcfg_without = replace(tcfg, use_strain=False)

    auc_with, auc_without = [], []
    for seed in seeds:
        auc_with.append(run_task(manifest, task, mcfg_with, tcfg_with, seed).auc)
        auc_without.append(run_task(manifest, task, mcfg_without, tcfg_without, seed).auc)

    aw = np.array(auc_with)
    ao = np.array(auc_without)
    diffs = aw - ao
    return AblationReport(
        task=task,
        split_seeds=seeds,
        auc_with=list(map(float, aw)),
        auc_without=list(map(float, ao)),
        mean_with=float(aw.mean()),
        std_with=float(aw.std(ddof=1)) if len(aw) > 1 else 0.0,
        mean_without=float(ao.mean()),
        std_without=float(ao.std(ddof=1)) if len(ao) > 1 else 0.0,
        mean_diff=float(diffs.mean()),
        p_value=float(sign_flip_p_value(diffs)),
    )
