"""Bilevel optimization: MAML / Meta-Curvature training and episode fine-tuning.

Inner updates are built functionally on the live parameter tensors, so the
meta-gradient flows through the unrolled loop. With second_order=False the
inner gradients are detached before the update (the update arithmetic itself
stays differentiable, so the curvature transform still receives gradient).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import episodes as ep
from . import learners, nn
from . import tensor as T
from .learners import HeadConfig
from .nn import ConfigError, ParamSet
from .tensor import NumericError, Tensor


class CurvatureSet:
    """Per-parameter learnable gradient transform, identity-initialized.

    mode 'diagonal': an elementwise scale per parameter (init ones).
    mode 'factored': per-tensor-mode square matrices (init identity); 4-D
    convolution kernels group the two spatial modes together.
    """

    def __init__(self, params: ParamSet = None, mode="diagonal"):
        if mode not in ("diagonal", "factored"):
            raise ConfigError(f"unknown curvature mode: {mode}")
        self.mode = mode
        self._mats: dict[str, list[Tensor]] = {}
        if params is not None:
            for name, t in params.trainable_items():
                self._mats[name] = self._init_for(t)

    def _init_for(self, t):
        dtype = t.dtype
        if self.mode == "diagonal":
            return [Tensor(np.ones(t.shape, dtype=dtype), requires_grad=True)]
        dims = self._factored_dims(t.shape)
        return [Tensor(np.eye(d, dtype=dtype), requires_grad=True) for d in dims]

    @staticmethod
    def _factored_dims(shape):
        if len(shape) <= 1:
            return [int(np.prod(shape)) if shape else 1]
        if len(shape) == 2:
            return [shape[0], shape[1]]
        if len(shape) == 4:
            return [shape[0], shape[1], shape[2] * shape[3]]
        raise ConfigError(f"factored curvature unsupported for shape {shape}")

    def transform(self, name, g):
        """Apply this parameter's transform to a gradient tensor."""
        mats = self._mats[name]
        if self.mode == "diagonal":
            return mats[0] * g
        shape = g.shape
        if len(shape) <= 1:
            v = T.reshape(g, (1, -1))
            return T.reshape(T.matmul(v, T.swap_last(mats[0])), shape)
        if len(shape) == 2:
            return T.matmul(T.matmul(mats[0], g), T.swap_last(mats[1]))
        # (O, C, kh, kw): modes O, C, spatial
        o, c, kh, kw = shape
        x = T.reshape(g, (o, c, kh * kw))
        x = T.matmul(x, T.swap_last(mats[2]))                  # spatial mode
        x = T.transpose(x, (0, 2, 1))
        x = T.matmul(x, T.swap_last(mats[1]))                  # channel mode
        x = T.transpose(x, (0, 2, 1))
        x = T.matmul(mats[0], T.reshape(x, (o, c * kh * kw)))  # output mode
        return T.reshape(x, shape)

    def names(self):
        return list(self._mats)

    def tensors(self):
        return [m for mats in self._mats.values() for m in mats]

    def named_tensors(self):
        return [(f"{n}/{i}", m) for n, mats in self._mats.items()
                for i, m in enumerate(mats)]

    def clone(self):
        out = CurvatureSet(mode=self.mode)
        for n, mats in self._mats.items():
            out._mats[n] = [Tensor(m.data.copy(), requires_grad=True) for m in mats]
        return out

    def checksum(self):
        import hashlib
        h = hashlib.sha256()
        for n, m in self.named_tensors():
            h.update(n.encode())
            h.update(np.ascontiguousarray(m.data).tobytes())
        return h.hexdigest()

    def load_arrays(self, arrays):
        for key, a in arrays.items():
            name, idx = key.rsplit("/", 1)
            self._mats[name][int(idx)] = Tensor(a.copy(), requires_grad=True)


@dataclass
class MetaConfig:
    spec: nn.BackboneSpec
    head: HeadConfig
    scheme: str = "adft"              # none | rdft | idft | adft
    alpha: float = 0.2
    beta: float = 1e-3
    rounds: int = 8
    second_order: bool = False
    curvature_mode: str = "diagonal"
    optimizer: str = "sgd"            # sgd | adam
    clip_norm: float = 0.0            # 0 disables outer gradient clipping
    augmenter: object = None          # callable(Sample, rng) -> Sample, ADFT only
    use_global_loss: bool = True      # CAN auxiliary term in the outer loss
    global_class_index: dict = None   # original class-id -> train-class index
    learn_curvature: bool = True      # False = plain MAML (identity M, frozen)


def _adapt(params: ParamSet, curvature: CurvatureSet, pseudo_episodes, cfg: MetaConfig,
           build_graph: bool):
    """Run rounds x pseudo-episodes inner updates; returns the adapted ParamSet.

    build_graph=True keeps the update chain differentiable for the meta-step;
    otherwise updates are plain arithmetic on fresh leaf tensors.
    """
    if cfg.second_order and not build_graph:
        raise ConfigError("second-order meta-gradient requested without inner graph")
    if not pseudo_episodes:
        raise ConfigError("inner adaptation needs at least one pseudo-episode")
    if cfg.alpha < 0:
        raise ConfigError(f"inner learning rate must be >= 0, got {cfg.alpha}")
    theta = ParamSet()
    for n, t in params.items():
        theta.add(n, t, trainable=params._trainable[n])
    names = [n for n, _ in theta.trainable_items()]
    for rnd in range(cfg.rounds):
        for idx, pe in enumerate(pseudo_episodes):
            loss, _, _ = learners.episode_loss(theta, pe, cfg.spec, cfg.head,
                                               use_global=False)
            if not np.isfinite(loss.data).all():
                raise NumericError(
                    f"non-finite inner loss {loss.item()} at round {rnd}, "
                    f"pseudo-episode {idx}")
            wrt = [theta[n] for n in names]
            grads = T.grad(loss, wrt, create_graph=(build_graph and cfg.second_order))
            alpha = np.asarray(cfg.alpha, dtype=wrt[0].dtype)
            if build_graph:
                for n, g in zip(names, grads):
                    step = curvature.transform(n, g)
                    theta[n] = theta[n] + T.neg(T._const(alpha) * step)
            else:
                with T.no_grad():
                    for n, g in zip(names, grads):
                        step = curvature.transform(n, g)
                        theta[n] = Tensor(theta[n].data - alpha * step.data,
                                          requires_grad=True)
    return theta


def inner_adapt(params, curvature, pseudo_episodes, cfg: MetaConfig):
    """Episode-specific adaptation for inference; no meta-graph is built."""
    return _adapt(params, curvature, pseudo_episodes, cfg, build_graph=False)


class OuterOptimizer:
    """Plain SGD or Adam over named outer parameters."""

    def __init__(self, kind="sgd", beta=1e-3, adam_betas=(0.9, 0.999), eps=1e-8):
        if kind not in ("sgd", "adam"):
            raise ConfigError(f"unknown outer optimizer: {kind}")
        self.kind = kind
        self.beta = beta
        self.b1, self.b2 = adam_betas
        self.eps = eps
        self._m, self._v, self._t = {}, {}, 0

    def step(self, named_tensors, named_grads):
        self._t += 1
        for (name, p), g in zip(named_tensors, named_grads):
            if self.kind == "sgd":
                p.data = p.data - self.beta * g
            else:
                m = self._m.get(name, 0.0) * self.b1 + (1 - self.b1) * g
                v = self._v.get(name, 0.0) * self.b2 + (1 - self.b2) * g * g
                self._m[name], self._v[name] = m, v
                mh = m / (1 - self.b1 ** self._t)
                vh = v / (1 - self.b2 ** self._t)
                p.data = p.data - self.beta * mh / (np.sqrt(vh) + self.eps)


def _global_labels(episode, cfg):
    if cfg.head.head != "can" or not cfg.use_global_loss or cfg.global_class_index is None:
        return False, None
    return True, [cfg.global_class_index[s.class_id] for s in episode.query]


def meta_step(theta: ParamSet, curvature: CurvatureSet, episode, cfg: MetaConfig,
              optimizer: OuterOptimizer = None, rng=None):
    """One outer update on a training episode; mutates theta and curvature in place.

    Returns (meta-loss value, query accuracy of the adapted model).
    """
    if not episode.query:
        raise ConfigError("meta_step needs a non-empty query set")
    if cfg.scheme != "none" and episode.shot < 2:
        raise ConfigError(f"scheme {cfg.scheme} requires N >= 2, episode has N={episode.shot}")
    if cfg.scheme == "none":
        adapted = theta
    else:
        pes = ep.split_support(episode.support, cfg.scheme,
                               augmenter=cfg.augmenter, rng=rng)
        adapted = _adapt(theta, curvature, pes, cfg, build_graph=True)
    use_global, glabels = _global_labels(episode, cfg)
    loss, _, acc = learners.episode_loss(adapted, episode, cfg.spec, cfg.head,
                                         use_global=use_global, global_labels=glabels)
    if not np.isfinite(loss.data).all():
        raise NumericError(f"non-finite meta-loss {loss.item()}")
    named = [(n, t) for n, t in theta.trainable_items()]
    if cfg.scheme != "none" and cfg.learn_curvature:
        named += curvature.named_tensors()
    wrt = [t for _, t in named]
    # params can be legitimately unreachable here (e.g. global head with
    # lambda=0); zero gradients are the intended outcome
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        grads = [g.data for g in T.grad(loss, wrt)]
    if cfg.clip_norm > 0:
        total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
        if total > cfg.clip_norm:
            scale = cfg.clip_norm / total
            grads = [g * scale for g in grads]
    if optimizer is None:
        optimizer = OuterOptimizer("sgd", beta=cfg.beta)
    optimizer.step(named, grads)
    return float(loss.item()), acc


def episode_finetune_eval(theta: ParamSet, curvature: CurvatureSet, episode,
                          cfg: MetaConfig, rng=None):
    """Query accuracy before and after episode-specific fine-tuning.

    theta and curvature are read-only; adaptation happens on clones and is
    discarded afterwards.
    """
    base = theta.clone()
    _, _, acc_before = learners.episode_loss(base, episode, cfg.spec, cfg.head,
                                             use_global=False)
    if cfg.scheme == "none" or cfg.rounds == 0:
        return {"acc_before": acc_before, "acc_after": acc_before}
    pes = ep.split_support(episode.support, cfg.scheme,
                           augmenter=cfg.augmenter, rng=rng)
    adapted = inner_adapt(base, curvature.clone(), pes, cfg)
    _, _, acc_after = learners.episode_loss(adapted, episode, cfg.spec, cfg.head,
                                            use_global=False)
    return {"acc_before": acc_before, "acc_after": acc_after}
