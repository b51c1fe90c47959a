"""Subject-independent folds and pre-training subset sampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class FoldAssignment:
    k: int
    fold_of_subject: dict

    def test_subjects(self, fold):
        return sorted(s for s, f in self.fold_of_subject.items() if f == fold)

    def fold_indices(self, manifest, fold):
        """(train row indices, test row indices) of ``manifest`` for ``fold``."""
        if not 0 <= fold < self.k:
            raise ConfigError(f"fold {fold} outside 0..{self.k - 1}")
        try:
            folds = np.array([self.fold_of_subject[s] for s in manifest.subject_ids], dtype=np.int64)
        except KeyError as exc:
            raise ConfigError(f"subject {exc} is not covered by this fold assignment") from None
        return np.flatnonzero(folds != fold), np.flatnonzero(folds == fold)

    def split(self, manifest, fold):
        train, test = self.fold_indices(manifest, fold)
        return manifest.subset(train), manifest.subset(test)

    def fold_sizes(self):
        sizes = [0] * self.k
        for f in self.fold_of_subject.values():
            sizes[f] += 1
        return sizes


def subject_kfold(manifest, k=3, seed=0):
    """Partition subjects into ``k`` folds whose sizes differ by at most one.

    ``manifest`` may also be a dataset or a plain iterable of subject ids.
    """
    if hasattr(manifest, "subjects"):
        subjects = manifest.subjects()
    else:
        subjects = sorted(set(getattr(manifest, "subject_ids", manifest)))
    if k < 2:
        raise ConfigError(f"k must be at least 2, got {k}")
    if len(subjects) < k:
        raise ConfigError(f"{len(subjects)} subjects cannot fill {k} folds")
    order = np.random.default_rng(seed).permutation(len(subjects))
    return FoldAssignment(k, {subjects[j]: pos % k for pos, j in enumerate(order)})


def _balanced_counts(n, available):
    """Split ``n`` between M and F; the extra unit of an odd ``n`` goes to M."""
    want = {"M": n - n // 2, "F": n // 2}
    if any(want[g] > available.get(g, 0) for g in want):
        raise ConfigError(
            f"gender-balanced sample of {n} needs {want['M']} M / {want['F']} F, "
            f"available {available.get('M', 0)} M / {available.get('F', 0)} F"
        )
    return want


def sample_by_images(manifest, n_images, gender_balanced=False, seed=0):
    """Uniform image-level subset without replacement, ignoring subject identity.

    Records keep their manifest order.
    """
    if n_images < 1:
        raise ConfigError(f"n_images must be positive, got {n_images}")
    rng = np.random.default_rng(seed)
    if not gender_balanced:
        if n_images > len(manifest):
            raise ConfigError(f"requested {n_images} images, only {len(manifest)} available")
        idx = rng.choice(len(manifest), size=n_images, replace=False)
    else:
        genders = manifest.genders
        pools = {g: np.flatnonzero(genders == g) for g in ("M", "F")}
        want = _balanced_counts(n_images, {g: len(p) for g, p in pools.items()})
        idx = np.concatenate([rng.choice(pools[g], size=want[g], replace=False) for g in ("M", "F")])
    return manifest.subset(np.sort(idx))


def sample_by_subjects(manifest, n_subjects, gender_balanced=False, seed=0, per_subject_cap=None):
    """Choose ``n_subjects`` people uniformly and keep their images.

    With ``per_subject_cap`` at most that many images per chosen subject are
    kept, drawn uniformly.
    """
    if n_subjects < 1:
        raise ConfigError(f"n_subjects must be positive, got {n_subjects}")
    rng = np.random.default_rng(seed)
    subj_gender = manifest.subject_genders()
    subjects = sorted(subj_gender)
    if not gender_balanced:
        if n_subjects > len(subjects):
            raise ConfigError(f"requested {n_subjects} subjects, only {len(subjects)} available")
        chosen = [subjects[i] for i in rng.choice(len(subjects), size=n_subjects, replace=False)]
    else:
        pools = {g: [s for s in subjects if subj_gender[s] == g] for g in ("M", "F")}
        want = _balanced_counts(n_subjects, {g: len(p) for g, p in pools.items()})
        chosen = []
        for g in ("M", "F"):
            chosen += [pools[g][i] for i in rng.choice(len(pools[g]), size=want[g], replace=False)]
    chosen = set(chosen)
    keep = [i for i, s in enumerate(manifest.subject_ids) if s in chosen]
    if per_subject_cap is not None:
        if per_subject_cap < 1:
            raise ConfigError(f"per_subject_cap must be positive, got {per_subject_cap}")
        by_subject = {}
        for i in keep:
            by_subject.setdefault(manifest.subject_ids[i], []).append(i)
        keep = []
        for s in sorted(by_subject):
            rows = by_subject[s]
            if len(rows) > per_subject_cap:
                rows = sorted(rng.choice(rows, size=per_subject_cap, replace=False).tolist())
            keep += rows
        keep.sort()
    return manifest.subset(keep)


def spread_over_subjects(manifest, n_images, seed=0):
    """``n_images`` rows spread as evenly as possible over every subject.

    Each subject gets ``n_images // k`` images and a random ``n_images % k``
    of them one more, so every subject stays represented when
    ``n_images >= k``.
    """
    by_subject = {}
    for i, s in enumerate(manifest.subject_ids):
        by_subject.setdefault(s, []).append(i)
    subjects = sorted(by_subject)
    k = len(subjects)
    if n_images < 1:
        raise ConfigError(f"n_images must be positive, got {n_images}")
    rng = np.random.default_rng(seed)
    quota = np.full(k, n_images // k)
    quota[rng.choice(k, size=n_images % k, replace=False)] += 1
    keep = []
    for s, q in zip(subjects, quota):
        rows = by_subject[s]
        if q > len(rows):
            raise ConfigError(f"subject {s} has {len(rows)} images, {q} needed for {n_images} over {k} subjects")
        keep += rng.choice(rows, size=q, replace=False).tolist()
    return manifest.subset(np.sort(np.asarray(keep, dtype=np.int64)))


def holdout_subjects(subject_ids, fraction, seed=0):
    """Split row indices so that ``fraction`` of subjects (at least one) are held out."""
    subject_ids = np.asarray(subject_ids, dtype=object)
    subjects = sorted(set(subject_ids.tolist()))
    if len(subjects) < 2:
        raise ConfigError("need at least two subjects to hold some out")
    n_hold = min(len(subjects) - 1, max(1, int(round(fraction * len(subjects)))))
    rng = np.random.default_rng(seed)
    held = {subjects[i] for i in rng.choice(len(subjects), size=n_hold, replace=False)}
    mask = np.array([s in held for s in subject_ids], dtype=bool)
    return np.flatnonzero(~mask), np.flatnonzero(mask)


def holdout_images(n, fraction, seed=0):
    """Random (train, test) row split with ``fraction`` of rows (at least one) in test."""
    if n < 2:
        raise ConfigError("need at least two records for a train/test split")
    n_test = min(n - 1, max(1, int(round(fraction * n))))
    perm = np.random.default_rng(seed).permutation(n)
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])
