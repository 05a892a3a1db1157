"""
Case loading, train/validation/test splitting and data-access auditing.
"""
from collections import defaultdict
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np

from pipelines.preprocess import resample_nearest
from utils.errors import DataError, UsageError
from utils.logger import setup_logger
from volumes.phantom import Manifest
from volumes.volgrid import LabelMask, Spacing, Volume, load_svol

logger = setup_logger(__name__)

ISOTROPIC_1MM = Spacing.isotropic(1.0)
ROLES = ("train", "validation", "test")


@dataclass(frozen=True)
class Case:
    case_id: str
    ct: Volume
    label: Optional[LabelMask]

    def resampled(self, target: Spacing = ISOTROPIC_1MM) -> "Case":
        label = resample_nearest(self.label, target) if self.label is not None else None
        return Case(self.case_id, resample_nearest(self.ct, target), label)


@dataclass(frozen=True)
class DatasetSplit:
    train: Tuple[str, ...]
    validation: Tuple[str, ...]
    test: Tuple[str, ...]
    fold: int = 0

    def __post_init__(self):
        sets = [set(self.train), set(self.validation), set(self.test)]
        if sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2]:
            raise UsageError("Train, validation and test case ids must be disjoint")

    def role_of(self, case_id: str) -> Optional[str]:
        for role in ROLES:
            if case_id in getattr(self, role):
                return role
        return None

    def audit_lines(self) -> List[str]:
        return [
            f"fold={self.fold} train={len(self.train)} validation={len(self.validation)} test={len(self.test)}",
            "validation: " + ",".join(self.validation),
            "test: " + ",".join(self.test),
        ]


def split_cases(
    case_ids: Sequence[str],
    seed: int,
    fold: int = 0,
    n_folds: int = 5,
    test_fraction: float = 0.2,
) -> DatasetSplit:
    """
    Seeded shuffle; the last ``test_fraction`` is the fixed test set, the rest
    is cut into ``n_folds`` contiguous blocks and block ``fold`` validates.
    """
    ids = list(case_ids)
    if len(set(ids)) != len(ids):
        raise UsageError("Case ids must be unique")
    if len(ids) < n_folds or len(ids) < 5:
        raise UsageError(f"Need at least {max(n_folds, 5)} cases to split, got {len(ids)}")
    if not 0 <= fold < n_folds:
        raise UsageError(f"Fold {fold} outside [0, {n_folds})")
    if not 0 < test_fraction < 1:
        raise UsageError(f"test_fraction must lie in (0, 1), got {test_fraction}")

    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    n_test = max(1, int(round(len(ids) * test_fraction)))
    pool, test = shuffled[:-n_test], shuffled[-n_test:]
    if len(pool) < n_folds:
        raise UsageError(f"{len(pool)} non-test cases cannot form {n_folds} validation blocks")

    blocks = np.array_split(np.arange(len(pool)), n_folds)
    val_idx = set(blocks[fold].tolist())
    validation = [pool[i] for i in sorted(val_idx)]
    train = [pool[i] for i in range(len(pool)) if i not in val_idx]
    return DatasetSplit(train=tuple(train), validation=tuple(validation), test=tuple(test), fold=fold)


class CaseStore:
    """
    Loaded cases plus an audit log of which role touched which case.

    With a split attached, reading a case under a role it does not belong to
    raises ``UsageError``.
    """

    def __init__(self, cases: Iterable[Case], split: Optional[DatasetSplit] = None):
        self._cases: Dict[str, Case] = {c.case_id: c for c in cases}
        self.split = split
        self.access_log: Dict[str, Set[str]] = defaultdict(set)

    def __len__(self) -> int:
        return len(self._cases)

    def case_ids(self) -> List[str]:
        return list(self._cases)

    def with_split(self, split: DatasetSplit) -> "CaseStore":
        missing = [cid for role in ROLES for cid in getattr(split, role) if cid not in self._cases]
        if missing:
            raise UsageError(f"Split references unknown cases: {missing[:5]}")
        return CaseStore(self._cases.values(), split)

    def get(self, case_id: str, role: str) -> Case:
        if role not in ROLES:
            raise UsageError(f"Unknown access role {role!r}")
        if case_id not in self._cases:
            raise UsageError(f"Unknown case {case_id!r}")
        if self.split is not None and case_id not in getattr(self.split, role):
            raise UsageError(f"Case {case_id} is not part of the {role} split")
        self.access_log[role].add(case_id)
        return self._cases[case_id]

    def role_cases(self, role: str) -> List[Case]:
        if self.split is None:
            raise UsageError("role_cases needs a split")
        return [self.get(cid, role) for cid in getattr(self.split, role)]


def load_cases(manifest: Manifest, resample_to: Optional[Spacing] = ISOTROPIC_1MM) -> List[Case]:
    """Read every manifest pair, resampled to ``resample_to`` when given."""
    cases = []
    for entry in manifest.entries:
        ct_path, label_path = manifest.root / entry.ct_path, manifest.root / entry.label_path
        try:
            ct, label = load_svol(ct_path), load_svol(label_path)
        except OSError as e:
            raise DataError(f"Cannot read case {entry.case_id}: {e}") from e
        if not isinstance(ct, Volume) or not isinstance(label, LabelMask):
            raise DataError(f"Case {entry.case_id}: expected a CT volume and a label mask")
        if ct.shape != label.shape or ct.spacing != label.spacing:
            raise DataError(f"Case {entry.case_id}: CT {ct.shape} and label {label.shape} are not aligned")
        case = Case(entry.case_id, ct, label)
        cases.append(case.resampled(resample_to) if resample_to is not None else case)
    logger.info("cases loaded", count=len(cases), root=str(manifest.root))
    return cases
