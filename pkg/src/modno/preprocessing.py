"""Fixed affine rescaling of training data, folded back into the networks afterwards.

Training runs on rescaled shards:

* branch inputs divided by one scalar shared by every operator,
* trunk coordinates centered and stretched to ``[-query_range, query_range]``
  per operator and coordinate,
* optionally, targets standardized per operator.

:meth:`ShardScaler.fold` rewrites a model trained on rescaled data into one
that takes raw inputs and returns raw targets.  The input maps fold into the
first layers and the target scale into each trunk's last layer; the target
offset becomes the model's ``output_shift``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .autodiff import MlpParams
from .exceptions import ConfigError
from .models import DonModel, ModnoModel


def fold_input_affine(params, center, scale):
    """Network ``x -> f((x - center) * scale)`` expressed on raw ``x``."""
    center = np.broadcast_to(np.asarray(center, dtype=np.float64), (params.d_in,))
    scale = np.broadcast_to(np.asarray(scale, dtype=np.float64), (params.d_in,))
    w0 = params.weights[0] * scale[None, :]
    b0 = params.biases[0] - w0 @ center
    return MlpParams(params.layer_sizes, [w0, *params.weights[1:]], [b0, *params.biases[1:]],
                     params.activation)


def scale_output(params, factor):
    w = [*params.weights[:-1], params.weights[-1] * factor]
    b = [*params.biases[:-1], params.biases[-1] * factor]
    return MlpParams(params.layer_sizes, w, b, params.activation)


@dataclass
class ShardScaler:
    input_scale: float
    query_center: list
    query_scale: list
    target_shift: list
    target_scale: list

    @classmethod
    def fit(cls, shards, query_range=1.0, normalize_targets=False):
        if not shards:
            raise ConfigError("no shards to fit")
        if query_range <= 0:
            raise ConfigError("query_range must be positive")
        pooled = np.concatenate([s.inputs.ravel() for s in shards])
        input_scale = float(np.std(pooled)) or 1.0
        centers, scales, shifts, tscales = [], [], [], []
        for s in shards:
            lo, hi = s.points.min(axis=0), s.points.max(axis=0)
            half = np.where(hi > lo, (hi - lo) / 2.0, 1.0)
            centers.append((lo + hi) / 2.0)
            scales.append(query_range / half)
            if normalize_targets:
                m = float(s.targets.mean())
                sd = float((s.targets - m).std())
                if sd == 0.0:
                    raise ConfigError(f"operator {s.operator_id} has constant targets")
                shifts.append(m)
                tscales.append(sd)
            else:
                shifts.append(0.0)
                tscales.append(1.0)
        return cls(input_scale, centers, scales, shifts, tscales)

    @property
    def n_operators(self):
        return len(self.query_center)

    def transform_one(self, shard, i):
        return replace(shard,
                       inputs=shard.inputs / self.input_scale,
                       points=(shard.points - self.query_center[i]) * self.query_scale[i],
                       targets=(shard.targets - self.target_shift[i]) / self.target_scale[i],
                       meta=dict(shard.meta))

    def transform(self, shards):
        if len(shards) != self.n_operators:
            raise ConfigError(f"scaler fitted on {self.n_operators} operators, got {len(shards)} shards")
        return [self.transform_one(s, i) for i, s in enumerate(shards)]

    def _fold_trunk(self, trunk, i):
        trunk = fold_input_affine(trunk, self.query_center[i], self.query_scale[i])
        return scale_output(trunk, self.target_scale[i])

    def fold(self, model, op_index=0):
        """Model on raw data equivalent to ``model`` on rescaled data.

        A :class:`DonModel` is folded with operator ``op_index``'s maps.
        """
        branch_of = model.branch if isinstance(model, DonModel) else model.shared_branch
        branch = fold_input_affine(branch_of, 0.0, 1.0 / self.input_scale)
        if isinstance(model, DonModel):
            i = op_index
            shift = self.target_shift[i] + self.target_scale[i] * model.output_shift
            return DonModel(branch, self._fold_trunk(model.trunk, i), shift)
        if model.n_operators != self.n_operators:
            raise ConfigError(f"scaler fitted on {self.n_operators} operators, model has {model.n_operators}")
        trunks = [self._fold_trunk(t, i) for i, t in enumerate(model.trunks)]
        shifts = [m + sd * c for m, sd, c in zip(self.target_shift, self.target_scale, model.output_shift)]
        return ModnoModel(branch, trunks, shifts)
