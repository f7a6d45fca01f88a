"""Preprocessing state bundled with a fitted predictor, applied to raw tables."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np

from . import preprocess
from .data import Dataset
from .models.base import Features, features_of


@dataclass(frozen=True)
class Pipeline:
    state: preprocess.PreprocessorState | None
    model: Any

    def features(self, data: Dataset) -> Features:
        if data.schema.preprocessed:
            if self.state is not None and data.schema != self.state.output_schema:
                raise ValueError("preprocessed data does not match the pipeline's output schema")
            return features_of(data)
        if self.state is None:
            raise ValueError("raw data given to a pipeline without a preprocessing state")
        return features_of(preprocess.transform(self.state, data))

    def predict(self, data: Dataset) -> np.ndarray:
        return self.model.predict(self.features(data))

    def digest(self) -> str:
        return self.model.digest()


def fit_pipeline(spec, data: Dataset, jobs: int | None = 1):
    """Final model for an experiment spec, trained on every row its setting allows.

    ``0`` uses the source group only, ``0.1``/``0.2`` add that share of the
    target group (stratified), and train-all uses the whole target group
    alone. Alpha follows the spec's policy; grid selection uses the same
    inner cross-validation as the evaluation harness. Returns the pipeline,
    the chosen alpha and the ids of target rows used.
    """
    from ._parallel import derive_seed
    from .data import GroupedDataset, adaptation_split
    from .evaluation.cv import ALPHA_GRID, TRAIN_ALL, _option_grid, fit_model, inner_folds, inner_select, \
        theory_alpha

    pair = GroupedDataset.from_groups(data, spec.attribute, spec.source, spec.target)
    f = spec.target_fraction
    if f == TRAIN_ALL:
        src_ids, used = [], list(pair.target.row_ids)
    elif f > 0:
        plan = adaptation_split(pair, spec.inner_folds, f, seed=derive_seed(spec.seed, 2))
        src_ids, used = list(pair.source.row_ids), [i for i in pair.target.row_ids if plan.assignments[i] >= 0]
    else:
        src_ids, used = list(pair.source.row_ids), []
    train = data.select_ids(src_ids + used)
    state = None if train.schema.preprocessed else preprocess.fit(train)
    train_p = train if state is None else preprocess.transform(state, train)
    feats, y = features_of(train_p), train_p.labels.astype(float)
    ids = list(train_p.row_ids)
    used_set = set(used)
    is_target = np.array([i in used_set for i in ids])
    seed = derive_seed(spec.seed, 6)
    if f == 0.0:
        alphas = [0.0]
    elif f == TRAIN_ALL:
        alphas = [1.0]
    elif spec.alpha_policy == "fixed":
        alphas = [spec.alpha]
    elif spec.alpha_policy == "grid":
        alphas = list(ALPHA_GRID)
    else:
        vc = spec.learner.options.get("vc_dimension", feats.width + 1)
        a = theory_alpha(feats, is_target, vc, spec.delta, seed)[0]
        alphas = [a] + [g for g in ALPHA_GRID if g != a]
    candidates = [(a, o) for a in alphas for o in _option_grid(spec.search)]
    alpha, opts = candidates[0]
    if len(candidates) > 1:
        folds = inner_folds(ids, y, is_target, spec.task, spec.inner_folds, derive_seed(seed, 4))
        (alpha, opts), _ = inner_select(spec, feats, y, ids, is_target, folds, candidates, seed)
    model = fit_model(spec, opts, feats, y, ids, is_target, alpha, derive_seed(seed, 5))
    return Pipeline(state, model), alpha, used
