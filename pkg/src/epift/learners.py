"""Metric-based heads: prototypical, matching, and cross-attention classifiers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .nn import ConfigError, ParamSet
from .tensor import Tensor


class DataError(ValueError):
    """Episode data is inconsistent (e.g. a query label outside the class set)."""


@dataclass
class HeadConfig:
    head: str = "pn"                  # pn | mn | can
    distance: str = "sqeuclidean"     # sqeuclidean | euclidean (PN)
    tau: float = 0.1                  # CAN softmax temperature
    global_weight: float = 1.0        # CAN auxiliary loss weight
    eps: float = 1e-12

    def __post_init__(self):
        if self.head not in ("pn", "mn", "can"):
            raise ConfigError(f"unknown head: {self.head}")
        if self.tau <= 0:
            raise ConfigError(f"temperature must be positive, got {self.tau}")


def add_can_params(params: ParamSet, spec: nn.BackboneSpec, rng):
    """Attach the meta-fusion layer (m -> m/2 -> m) used by the CAN head."""
    _, h, w = spec.output_shape()
    m = h * w
    m2 = max(1, m // 2)
    dtype = spec.dtype
    params.add("fusion.w1.weight",
               Tensor(nn._trunc_normal(rng, (m, m2)).astype(dtype), requires_grad=True))
    params.add("fusion.w1.bias", Tensor(np.zeros(m2, dtype=dtype), requires_grad=True))
    params.add("fusion.w2.weight",
               Tensor(nn._trunc_normal(rng, (m2, m)).astype(dtype), requires_grad=True))
    params.add("fusion.w2.bias", Tensor(np.zeros(m, dtype=dtype), requires_grad=True))


# -- prototypical ---------------------------------------------------------


def pn_prototypes(support_emb):
    """Class means of a (K, N, d) support embedding block."""
    return T.mean(support_emb, axis=1)


def pn_classify(query_emb, prototypes, distance="sqeuclidean", eps=1e-12):
    """Distance-softmax class distribution, (Q, d) x (K, d) -> (Q, K)."""
    d = T.squared_distance(query_emb, prototypes)
    if distance == "euclidean":
        d = T.sqrt(T.clip_min(d, eps))
    elif distance != "sqeuclidean":
        raise ConfigError(f"unknown PN distance: {distance}")
    return T.softmax(T.neg(d), axis=-1)


# -- matching -------------------------------------------------------------


def mn_classify(query_emb, support_emb, support_labels, way, eps=1e-12):
    """Attention over support cosine distances, summed into class weights.

    query_emb: (Q, d); support_emb: (K*N, d); support_labels: episode-local
    class indices per support row.
    """
    qn = _unit_rows(query_emb, eps)
    sn = _unit_rows(support_emb, eps)
    cos = T.matmul(qn, T.swap_last(sn))                 # (Q, K*N)
    one = T._const(np.asarray(1.0, dtype=cos.dtype))
    att = T.softmax(T.neg(one - cos), axis=-1)          # softmax over -cosine distance
    onehot = np.eye(way, dtype=att.dtype)[np.asarray(support_labels)]
    return T.matmul(att, T._const(onehot))              # (Q, K)


def _unit_rows(x, eps):
    n = T.sqrt(T.clip_min(T.sum_(x * x, axis=-1, keepdims=True), eps * eps))
    return x / n


# -- cross attention ------------------------------------------------------


def can_correlation(proto_map, query_map, eps=1e-12):
    """Local cosine-similarity correlation between two (c, h, w) maps.

    Returns (R, Rc, Rq): R is (m, h, w) with R[i] the query-position grid of
    similarities against prototype position i; Rq = R and Rc swaps the roles.
    """
    if proto_map.shape != query_map.shape:
        raise T.ShapeError(
            f"correlation maps must share shape, got {proto_map.shape} vs {query_map.shape}")
    c, h, w = proto_map.shape
    m = h * w
    pu = _unit_cols(T.reshape(proto_map, (c, m)), eps)   # (c, m)
    qu = _unit_cols(T.reshape(query_map, (c, m)), eps)
    r = T.matmul(T.swap_last(pu), qu)                    # (m, m): [i, p]
    return (T.reshape(r, (m, h, w)),
            T.reshape(T.swap_last(r), (m, h, w)),
            T.reshape(r, (m, h, w)))


def _unit_cols(x, eps):
    n = T.sqrt(T.clip_min(T.sum_(x * x, axis=-2, keepdims=True), eps * eps))
    return x / n


def can_attention(rx, params: ParamSet, tau):
    """Meta-fusion attention over the trailing spatial positions of rx.

    rx: (..., m, h, w) correlation map; each spatial position holds an
    m-vector. Returns (..., h, w) softmax attention.
    """
    if tau <= 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    h, w = rx.shape[-2], rx.shape[-1]
    m = rx.shape[-3]
    flat = T.reshape(rx, rx.shape[:-3] + (m, h * w))     # (..., m, P)
    gap = T.mean(flat, axis=-1)                          # (..., m)
    hdn = T.relu(T.matmul(_as2d(gap), params["fusion.w1.weight"]) + params["fusion.w1.bias"])
    kern = T.matmul(hdn, params["fusion.w2.weight"]) + params["fusion.w2.bias"]
    kern = T.reshape(kern, gap.shape[:-1] + (1, m))      # (..., 1, m)
    scores = T.reshape(T.matmul(kern, flat), gap.shape[:-1] + (h * w,))
    inv_tau = T._const(np.asarray(1.0 / tau, dtype=rx.dtype))
    att = T.softmax(scores * inv_tau, axis=-1)
    return T.reshape(att, gap.shape[:-1] + (h, w))


def _as2d(x):
    # matmul needs >=2-D; lift a bare (m,) vector to (1, m) and back
    if x.ndim == 1:
        return T.reshape(x, (1, -1))
    return x


def can_apply_attention(feature, att):
    """feature (..., c, h, w) scaled elementwise by (1 + att)."""
    one = T._const(np.asarray(1.0, dtype=feature.dtype))
    a = T.reshape(att, att.shape[:-2] + (1,) + att.shape[-2:])
    return feature * (one + a)


def _can_pair_logits(proto_flat, query_flat, params, cfg, h, w):
    """Attended pairwise logits for flattened maps.

    proto_flat: (K, c, m); query_flat: (Q, c, m) -> logits (Q, K).
    """
    kk, c, m = proto_flat.shape
    qq = query_flat.shape[0]
    eps = cfg.eps
    pu = _unit_mid(proto_flat, eps)                       # (K, c, m)
    qu = _unit_mid(query_flat, eps)
    r = T.matmul(T.reshape(T.swap_last(pu), (1, kk, m, c)),
                 T.reshape(qu, (qq, 1, c, m)))            # (Q, K, m_p, m_q)
    a_q = can_attention(T.reshape(r, (qq, kk, m, h, w)), params, cfg.tau)
    a_c = can_attention(T.reshape(T.swap_last(r), (qq, kk, m, h, w)), params, cfg.tau)
    a_q = T.reshape(a_q, (qq, kk, 1, m))
    a_c = T.reshape(a_c, (qq, kk, 1, m))
    one = T._const(np.asarray(1.0, dtype=r.dtype))
    ap = T.reshape(proto_flat, (1, kk, c, m)) * (one + a_c)
    aq = T.reshape(query_flat, (qq, 1, c, m)) * (one + a_q)
    diff = aq + T.neg(ap)
    d = T.sum_(diff * diff, axis=(-2, -1))                # (Q, K)
    return T.neg(d)


def _unit_mid(x, eps):
    n = T.sqrt(T.clip_min(T.sum_(x * x, axis=-2, keepdims=True), eps * eps))
    return x / n


# -- episode loss ---------------------------------------------------------


def _episode_batches(episode, spec):
    # batch assembly is pure in (episode, spec); cache it on the episode since
    # inner loops revisit the same pseudo-episode every round
    cached = getattr(episode, "_batch_cache", None)
    if cached is not None and cached[0] is spec:
        return cached[1]
    support, query = episode.support, episode.query
    flat = [s for row in support for s in row]
    feats = [nn.fit_input(s.features, spec) for s in flat + list(query)]
    batch = np.stack(feats)[:, None, :, :]
    class_to_idx = {row[0].class_id: k for k, row in enumerate(support)}
    labels = []
    for s in query:
        if s.class_id not in class_to_idx:
            raise DataError(f"query class {s.class_id} not in episode class set")
        labels.append(class_to_idx[s.class_id])
    result = (batch, np.asarray(labels), len(flat))
    try:
        episode._batch_cache = (spec, result)
    except AttributeError:
        pass
    return result


def episode_loss(params: ParamSet, episode, spec: nn.BackboneSpec, cfg: HeadConfig,
                 use_global=False, global_labels=None):
    """Loss, per-query predicted classes, and accuracy for one (pseudo-)episode.

    Support and query are embedded in a single forward pass so batch-stats
    normalization sees one consistent batch. `use_global` adds the CAN
    auxiliary all-training-classes term weighted by cfg.global_weight;
    `global_labels` are the original train-class ids of the query samples.
    """
    support, query = episode.support, episode.query
    way, shot = len(support), len(support[0])
    batch, labels, n_sup = _episode_batches(episode, spec)
    emb = nn.embed(params, batch, spec)
    sup = emb[:n_sup]
    qry = emb[n_sup:]
    onehot = np.eye(way, dtype=spec.dtype)[labels]

    if cfg.head == "pn":
        protos = pn_prototypes(T.reshape(sup, (way, shot) + sup.shape[1:]))
        probs = pn_classify(qry, protos, distance=cfg.distance, eps=cfg.eps)
        loss = _nll(probs, onehot)
    elif cfg.head == "mn":
        sup_labels = np.repeat(np.arange(way), shot)
        probs = mn_classify(qry, sup, sup_labels, way, eps=cfg.eps)
        loss = _nll(probs, onehot)
    else:  # can
        c, h, w = sup.shape[1], sup.shape[2], sup.shape[3]
        m = h * w
        proto_flat = T.reshape(
            pn_prototypes(T.reshape(sup, (way, shot, c, h, w))), (way, c, m))
        query_flat = T.reshape(qry, (qry.shape[0], c, m))
        logits = _can_pair_logits(proto_flat, query_flat, params, cfg, h, w)
        probs = T.softmax(logits, axis=-1)
        loss = T.cross_entropy(logits, onehot)
        if use_global and cfg.global_weight > 0:
            if global_labels is None:
                raise DataError("global loss requested but no global labels given")
            glogits = nn.global_classifier(params, T.reshape(qry, (qry.shape[0], -1)))
            gone = np.eye(glogits.shape[-1], dtype=spec.dtype)[np.asarray(global_labels)]
            gw = T._const(np.asarray(cfg.global_weight, dtype=loss.dtype))
            loss = loss + gw * T.cross_entropy(glogits, gone)

    preds = np.argmax(probs.data, axis=-1)
    acc = float(np.mean(preds == labels)) if len(labels) else 0.0
    return loss, preds, acc


def _nll(probs, onehot):
    lp = T.log(T.clip_min(probs, 1e-30))
    return T.neg(T.mean(T.sum_(lp * T._const(onehot), axis=-1)))
