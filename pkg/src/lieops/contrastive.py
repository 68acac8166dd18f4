"""Contrastive training with manifold feature augmentations.

Three layers live here:

* ``info_nce`` — the temperature-scaled contrastive loss for one anchor
  against a positive and a set of negatives, with analytic gradients and an
  optional projection network.
* ``manifoldclr_step`` — one full training step of the combined system:
  contrastive term on a prior-augmented anchor, manifold reconstruction term
  on posterior-sampled coefficients, and a weighted KL between the two
  coefficient distributions, all parameter groups updated concurrently.
* ``train_lie_operators`` — the standalone alternating scheme on point-pair
  data (infer coefficients, step the generators), with either exact FISTA
  inference or the amortized variational sampler.

Plus ``linear_probe`` for the frozen-feature evaluation protocol.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .datasets import PointPairBatch
from .errors import DivergenceError
from .inference import (
    LaplacianParams,
    VariationalConfig,
    best_of_many_batch,
    fista_infer,
    kl_laplacian_grads,
    kl_laplacian_terms,
    sample_laplacian,
    soft_threshold_st,
)
from .metrics import MetricsRecord, effective_rank
from .networks import (
    AdamWState,
    MlpNet,
    WarmupSchedule,
    adamw_update,
    cross_entropy,
    encode_posterior,
    encode_prior,
    posterior_backward,
    prior_backward,
)
from .operators import (
    InitConfig,
    OperatorDictionary,
    frobenius_penalty_grad,
    grad_clip_and_step,
    init_dictionary,
    manifold_loss_batch,
    manifold_loss_values,
    operator_frobenius_norms,
    transport,
    transport_backward,
)


def _di_mean(losses: np.ndarray, Z: np.ndarray, Zp: np.ndarray) -> float:
    """Mean ratio of transported to raw squared pair distance."""
    base = np.sum((Zp - Z) ** 2, axis=-1)
    keep = base > 0.0
    if not np.any(keep):
        return float("nan")
    return float(np.mean(losses[keep] / base[keep]))

SQUARED = "squared-distance"
NORMALIZED = "normalized-similarity"


@dataclass
class ContrastiveConfig:
    temperature: float = 0.5
    distance: str = SQUARED
    use_projection: bool = False
    augment_source: str = "prior"  # prior | encoder | none

    def __post_init__(self):
        if self.temperature <= 0.0:
            raise ValueError("temperature must be positive")
        if self.distance not in (SQUARED, NORMALIZED):
            raise ValueError(f"distance must be {SQUARED!r} or {NORMALIZED!r}")
        if self.augment_source not in ("prior", "encoder", "none"):
            raise ValueError("augment_source must be prior, encoder, or none")


@dataclass
class TrainConfig:
    """Scalar hyper-parameters of the combined objective and its optimizers."""

    lambda_manifold: float = 1.0
    kl_weight: float = 1.0e-5
    lr_backbone: float = 1.0e-3
    lr_operators: float = 1.0e-3
    lr_encoder: float = 1.0e-3
    lr_prior: float = 1.0e-3
    lr_projection: float = 1.0e-3
    wd_backbone: float = 1.0e-5
    wd_operators: float = 1.0e-3
    wd_encoder: float = 1.0e-5
    clip_norm_operators: float = 1.0
    clip_norm_nets: float = 5.0
    epochs: int = 60
    batch_size: int = 64
    seed: int = 0
    stop_grad_target: bool = True
    learned_prior: bool = True
    stop_prior_kl: bool = False
    threshold_prior_samples: bool = False

    def __post_init__(self):
        if self.lambda_manifold < 0.0 or self.kl_weight < 0.0:
            raise ValueError("loss weights must be non-negative")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (in-batch negatives)")


# ---------------------------------------------------------------------------
# InfoNCE
# ---------------------------------------------------------------------------


@dataclass
class InfoNceResult:
    loss: float
    d_anchor: np.ndarray
    d_positive: np.ndarray
    d_negatives: np.ndarray
    projection_grads: list | None = None


def _normalize_rows(v: np.ndarray):
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norms == 0.0):
        raise ValueError("cannot normalize a zero feature vector")
    return v / norms, norms


def _normalize_rows_backward(vn, norms, d_vn):
    return (d_vn - vn * np.sum(d_vn * vn, axis=-1, keepdims=True)) / norms


def info_nce(
    anchor: np.ndarray,
    positive: np.ndarray,
    negatives: np.ndarray,
    cfg: ContrastiveConfig,
    projection: MlpNet | None = None,
) -> InfoNceResult:
    """Contrastive loss for one anchor with analytic gradients.

    Distances are squared Euclidean on the (optionally projected, optionally
    row-normalized) features; the positive term appears in the denominator
    alongside every negative.
    """
    negatives = np.atleast_2d(np.asarray(negatives, dtype=np.float64))
    if negatives.shape[0] < 1 or negatives.size == 0:
        raise ValueError("need at least one negative")
    feats = np.concatenate(
        [np.asarray(anchor, dtype=np.float64)[None], np.asarray(positive, dtype=np.float64)[None], negatives],
        axis=0,
    )
    if projection is not None:
        u, pcache = projection.forward(feats)
    else:
        u = feats
    if cfg.distance == NORMALIZED:
        un, norms = _normalize_rows(u)
    else:
        un = u
    diff = un[0] - un  # row 0 is the anchor; diff[0] = 0
    dists = np.sum(diff * diff, axis=-1)
    logits = -dists[1:] / cfg.temperature  # positive first, then negatives
    m = logits.max()
    lse = m + np.log(np.sum(np.exp(logits - m)))
    loss = float(lse - logits[0])
    w = np.exp(logits - lse)
    # d loss / d dists[k]: positive gets (1 - w_pos) / tau, negatives -w_k / tau
    d_dists = -w / cfg.temperature
    d_dists[0] += 1.0 / cfg.temperature
    d_un = np.zeros_like(un)
    d_un[1:] = -2.0 * d_dists[:, None] * diff[1:]
    d_un[0] = 2.0 * d_dists @ diff[1:]
    if cfg.distance == NORMALIZED:
        d_u = _normalize_rows_backward(un, norms, d_un)
    else:
        d_u = d_un
    proj_grads = None
    if projection is not None:
        proj_grads, d_feats = projection.backward(pcache, d_u)
    else:
        d_feats = d_u
    return InfoNceResult(
        loss=loss,
        d_anchor=d_feats[0],
        d_positive=d_feats[1],
        d_negatives=d_feats[2:],
        projection_grads=proj_grads,
    )


# ---------------------------------------------------------------------------
# The combined training step
# ---------------------------------------------------------------------------


@dataclass
class ClrState:
    """All trainable pieces of the combined system plus optimizer moments."""

    backbone: MlpNet
    opdict: OperatorDictionary
    encoder: MlpNet | None
    prior: MlpNet | None  # None means a fixed prior
    projection: MlpNet | None
    warmup: WarmupSchedule
    iteration: int = 0
    opt_backbone: AdamWState | None = None
    opt_encoder: AdamWState | None = None
    opt_prior: AdamWState | None = None
    opt_projection: AdamWState | None = None


@dataclass
class StepLosses:
    total: float
    contrastive: float
    manifold: float
    kl: float
    coeff_l1: float
    di_mean: float


def _acc(acc, grads, scale=1.0):
    if acc is None:
        return [scale * g for g in grads]
    for a, g in zip(acc, grads):
        a += scale * g
    return acc


def manifoldclr_step(
    batch: PointPairBatch,
    state: ClrState,
    contrastive_cfg: ContrastiveConfig,
    train_cfg: TrainConfig,
    var_cfg: VariationalConfig,
    rng: np.random.Generator,
) -> tuple[StepLosses, ClrState]:
    """One optimizer step of the combined objective on a batch of pairs.

    Per pair: encode both views; sample augmentation coefficients (from the
    prior by default) and replace the anchor by its transported version;
    contrast against the positive with the other first-view features of the
    batch as negatives; add the weighted manifold loss on best-of-many
    posterior coefficients and the weighted KL. Every parameter group that
    received gradient is stepped once with its own clipped optimizer.

    The rng is consumed in a fixed order: augmentation draw first, then the
    posterior candidates. With augmentation off and both auxiliary weights at
    zero the step consumes no randomness and reduces to a plain contrastive
    update of the backbone (and projection).

    Raises:
        DivergenceError: if any loss component turns non-finite.
    """
    X, Xp = batch.sources, batch.targets
    n = X.shape[0]
    if n < 2:
        raise ValueError("batch must contain at least 2 pairs for in-batch negatives")
    lam = train_cfg.lambda_manifold
    beta = train_cfg.kl_weight
    source = contrastive_cfg.augment_source

    Z, cache_z = state.backbone.forward(X)
    Zp, cache_zp = state.backbone.forward(Xp)
    d_Z = np.zeros_like(Z)
    d_Zp = np.zeros_like(Zp)
    d_ops = np.zeros_like(state.opdict.ops)
    dict_touched = False

    need_q = lam > 0.0 or beta > 0.0 or source == "encoder"
    q_params = q_cache = None
    if need_q:
        if state.encoder is None:
            raise ValueError("configuration requires a posterior encoder")
        q_params, q_cache = encode_posterior(state.encoder, Z, Zp)
    need_p = beta > 0.0 or source == "prior"
    p_params = p_cache = None
    if need_p:
        if state.prior is not None:
            p_params, p_cache = encode_prior(state.prior, Z, state.warmup, state.iteration)
        else:
            p_params = LaplacianParams.from_scale(
                np.full((n, state.opdict.m), state.warmup.mu0),
                np.full((n, state.opdict.m), state.warmup.b0),
            )
    d_q_shift = d_q_scale = d_p_shift = d_p_scale = None

    # --- augmented anchors
    aug_noise = c_tilde = None
    if source != "none":
        aug_params = p_params if source == "prior" else q_params
        s, aug_noise = sample_laplacian(aug_params, rng)
        c_tilde = (
            soft_threshold_st(s, var_cfg.threshold)
            if train_cfg.threshold_prior_samples
            else s
        )
        anchors = transport(state.opdict, c_tilde, Z)
    else:
        anchors = Z

    # --- contrastive term with in-batch negatives
    loss_ctt = 0.0
    d_anchors = np.zeros_like(anchors)
    proj_grads = None
    neg_mask = ~np.eye(n, dtype=bool)
    for i in range(n):
        res = info_nce(anchors[i], Zp[i], Z[neg_mask[i]], contrastive_cfg, state.projection)
        loss_ctt += res.loss / n
        d_anchors[i] += res.d_anchor / n
        d_Zp[i] += res.d_positive / n
        d_Z[neg_mask[i]] += res.d_negatives / n
        if res.projection_grads is not None:
            proj_grads = _acc(proj_grads, res.projection_grads, 1.0 / n)

    # --- backpropagate through the augmentation
    if source != "none":
        d_ops_aug, d_c_tilde, d_z_aug = transport_backward(
            state.opdict, c_tilde, Z, d_anchors
        )
        d_Z += d_z_aug
        d_ops += d_ops_aug
        dict_touched = True
        # straight-through if thresholded: d_c_tilde passes to the sample
        if source == "prior" and state.prior is not None:
            d_p_shift = d_c_tilde.copy()
            d_p_scale = d_c_tilde * aug_noise
        elif source == "encoder":
            d_q_shift = d_c_tilde.copy()
            d_q_scale = d_c_tilde * aug_noise
    else:
        d_Z += d_anchors

    # --- manifold term on posterior best-of-many coefficients
    loss_m = 0.0
    coeff_l1 = 0.0
    di = 0.0
    if lam > 0.0:
        bom = best_of_many_batch(state.opdict, Z, Zp, q_params, var_cfg, rng)
        m_losses, mg = manifold_loss_batch(
            state.opdict, Z, Zp, bom.c, stop_grad_target=train_cfg.stop_grad_target
        )
        loss_m = float(np.mean(m_losses))
        coeff_l1 = float(np.mean(np.sum(np.abs(bom.c), axis=1)))
        di = _di_mean(m_losses, Z, Zp)
        d_ops += (lam / n) * mg.d_ops
        dict_touched = True
        d_Z += (lam / n) * mg.d_z
        d_Zp += (lam / n) * mg.d_zp
        d_c = (lam / n) * mg.d_c
        d_q_shift = d_c if d_q_shift is None else d_q_shift + d_c
        dq_sc = d_c * bom.noise
        d_q_scale = dq_sc if d_q_scale is None else d_q_scale + dq_sc

    # --- KL term
    loss_kl = 0.0
    if beta > 0.0:
        loss_kl = float(np.mean(np.sum(kl_laplacian_terms(q_params, p_params), axis=-1)))
        g_mu_q, g_b_q, g_mu_p, g_b_p = kl_laplacian_grads(q_params, p_params)
        d_q_shift = _acc_arr(d_q_shift, g_mu_q, beta / n)
        d_q_scale = _acc_arr(d_q_scale, g_b_q, beta / n)
        if state.prior is not None and not train_cfg.stop_prior_kl:
            d_p_shift = _acc_arr(d_p_shift, g_mu_p, beta / n)
            d_p_scale = _acc_arr(d_p_scale, g_b_p, beta / n)

    total = loss_ctt + lam * loss_m + beta * loss_kl
    if not np.isfinite(total):
        raise DivergenceError(
            "non-finite training loss",
            iteration=state.iteration,
            breakdown={"contrastive": loss_ctt, "manifold": loss_m, "kl": loss_kl},
        )

    # --- parameter updates (all gradients are complete at this point)
    if d_q_shift is not None:
        q_grads = posterior_backward(state.encoder, q_cache, d_q_shift, d_q_scale)
        adamw_update(
            state.encoder, q_grads, state.opt_encoder,
            lr=train_cfg.lr_encoder, weight_decay=train_cfg.wd_encoder,
            clip_norm=train_cfg.clip_norm_nets,
        )
    if d_p_shift is not None and state.prior is not None:
        p_grads = prior_backward(state.prior, p_cache, d_p_shift, d_p_scale)
        adamw_update(
            state.prior, p_grads, state.opt_prior,
            lr=train_cfg.lr_prior, weight_decay=train_cfg.wd_encoder,
            clip_norm=train_cfg.clip_norm_nets,
        )
    if proj_grads is not None:
        adamw_update(
            state.projection, proj_grads, state.opt_projection,
            lr=train_cfg.lr_projection, weight_decay=train_cfg.wd_backbone,
            clip_norm=train_cfg.clip_norm_nets,
        )
    f_grads, _ = state.backbone.backward(cache_z, d_Z)
    f_grads_p, _ = state.backbone.backward(cache_zp, d_Zp)
    f_grads = _acc(f_grads, f_grads_p)
    adamw_update(
        state.backbone, f_grads, state.opt_backbone,
        lr=train_cfg.lr_backbone, weight_decay=train_cfg.wd_backbone,
        clip_norm=train_cfg.clip_norm_nets,
    )
    if dict_touched:
        state.opdict = grad_clip_and_step(
            state.opdict, d_ops,
            lr=train_cfg.lr_operators,
            clip_norm=train_cfg.clip_norm_operators,
            weight_decay=train_cfg.wd_operators,
        )
    state.iteration += 1
    return (
        StepLosses(
            total=total, contrastive=loss_ctt, manifold=loss_m, kl=loss_kl,
            coeff_l1=coeff_l1, di_mean=di,
        ),
        state,
    )


def _acc_arr(acc, arr, scale):
    return scale * arr if acc is None else acc + scale * arr


# ---------------------------------------------------------------------------
# Full toy training loop
# ---------------------------------------------------------------------------


@dataclass
class ManifoldClrConfig:
    """Architecture plus all sub-configs for the toy combined system."""

    feature_dim: int = 16
    backbone_hidden: tuple = (64, 64)
    encoder_hidden: tuple = (64, 64)
    prior_hidden: tuple = (64, 64)
    projection_hidden: tuple = (32,)
    projection_dim: int = 16
    n_operators: int = 6
    block_size: int = 8
    init: InitConfig = field(default_factory=InitConfig)
    init_jitter: float = 0.0
    log_scale_clamp: tuple = (-6.0, 2.0)
    head_weight_scale: float = 0.0
    log_scale_bias: float = -2.3
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    variational: VariationalConfig = field(default_factory=VariationalConfig)
    warmup: WarmupSchedule = field(default_factory=lambda: WarmupSchedule(total_iters=200))


ABLATION_PRESETS = ("s0", "s1", "s2", "s3", "s4", "simclr")


def apply_preset(cfg: ManifoldClrConfig, preset: str) -> ManifoldClrConfig:
    """Return a config variant with one system component toggled off.

    s0 is the full system; s1 drops the stop-grad on the transport target;
    s2 drops the feature augmentations; s3 drops the manifold loss; s4 swaps
    the learned prior for the fixed one. ``simclr`` strips every manifold
    component, leaving the plain contrastive baseline.
    """
    if preset not in ABLATION_PRESETS:
        raise ValueError(f"unknown preset {preset!r}, expected one of {ABLATION_PRESETS}")
    cfg = replace(cfg)
    if preset == "s1":
        cfg.train = replace(cfg.train, stop_grad_target=False)
    elif preset == "s2":
        cfg.contrastive = replace(cfg.contrastive, augment_source="none")
    elif preset == "s3":
        cfg.train = replace(cfg.train, lambda_manifold=0.0)
    elif preset == "s4":
        cfg.train = replace(cfg.train, learned_prior=False)
    elif preset == "simclr":
        cfg.contrastive = replace(cfg.contrastive, augment_source="none")
        cfg.train = replace(cfg.train, lambda_manifold=0.0, kl_weight=0.0)
    return cfg


def init_clr_state(cfg: ManifoldClrConfig, input_dim: int, rng: np.random.Generator) -> ClrState:
    d = cfg.feature_dim
    m = cfg.n_operators
    backbone = MlpNet([input_dim, *cfg.backbone_hidden], d, "plain", rng=rng)
    need_encoder = (
        cfg.train.lambda_manifold > 0.0
        or cfg.train.kl_weight > 0.0
        or cfg.contrastive.augment_source == "encoder"
    )
    encoder = (
        MlpNet([2 * d, *cfg.encoder_hidden], m, "laplacian",
               log_scale_clamp=cfg.log_scale_clamp,
               head_weight_scale=cfg.head_weight_scale,
               log_scale_bias=cfg.log_scale_bias, rng=rng)
        if need_encoder else None
    )
    prior = (
        MlpNet([d, *cfg.prior_hidden], m, "laplacian",
               log_scale_clamp=cfg.log_scale_clamp,
               head_weight_scale=cfg.head_weight_scale,
               log_scale_bias=cfg.log_scale_bias, rng=rng)
        if cfg.train.learned_prior
        and (cfg.contrastive.augment_source == "prior" or cfg.train.kl_weight > 0.0)
        else None
    )
    projection = (
        MlpNet([d, *cfg.projection_hidden], cfg.projection_dim, "projection", rng=rng)
        if cfg.contrastive.use_projection else None
    )
    opdict = init_dictionary(
        m, d, cfg.block_size, cfg.init, rng,
        allow_odd=cfg.block_size % 2 == 1, jitter=cfg.init_jitter,
    )
    return ClrState(
        backbone=backbone,
        opdict=opdict,
        encoder=encoder,
        prior=prior,
        projection=projection,
        warmup=cfg.warmup,
        opt_backbone=AdamWState.for_net(backbone),
        opt_encoder=AdamWState.for_net(encoder) if encoder else None,
        opt_prior=AdamWState.for_net(prior) if prior else None,
        opt_projection=AdamWState.for_net(projection) if projection else None,
    )


def train_manifoldclr(
    sample_pairs,
    input_dim: int,
    cfg: ManifoldClrConfig,
    rng: np.random.Generator,
    *,
    steps_per_epoch: int,
    eval_features_fn=None,
    record_timing: bool = True,
) -> tuple[ClrState, list[MetricsRecord]]:
    """Run the combined system for ``cfg.train.epochs`` epochs.

    ``sample_pairs(rng) -> PointPairBatch`` supplies each step's batch.
    ``eval_features_fn(state) -> features`` is evaluated once per epoch for
    the effective-rank column (skipped when None).
    """
    state = init_clr_state(cfg, input_dim, rng)
    records = []
    elapsed = 0.0
    for epoch in range(cfg.train.epochs):
        t0 = time.perf_counter()
        agg = {"total": 0.0, "contrastive": 0.0, "manifold": 0.0, "kl": 0.0,
               "coeff_l1": 0.0, "di_mean": 0.0}
        for _ in range(steps_per_epoch):
            batch = sample_pairs(rng)
            losses, state = manifoldclr_step(
                batch, state, cfg.contrastive, cfg.train, cfg.variational, rng
            )
            for k in agg:
                agg[k] += getattr(losses, k) / steps_per_epoch
        elapsed += time.perf_counter() - t0
        erank = None
        if eval_features_fn is not None:
            erank = effective_rank(eval_features_fn(state))
        records.append(
            MetricsRecord(
                epoch=epoch,
                mse=agg["manifold"],
                l1=agg["coeff_l1"],
                kl=agg["kl"] if cfg.train.kl_weight > 0.0 else None,
                di_mean=agg["di_mean"],
                runtime_s=elapsed if record_timing else None,
                effective_rank=erank,
                op_fro=[float(v) for v in operator_frobenius_norms(state.opdict)],
            )
        )
    return state, records


# ---------------------------------------------------------------------------
# Standalone operator learning on point pairs
# ---------------------------------------------------------------------------


@dataclass
class OperatorTrainConfig:
    """Alternating-minimization settings for point-pair operator learning."""

    epochs: int = 1000
    l1_weight: float = 0.6
    fro_weight: float = 1.0e-3
    lr_operators: float = 0.03
    clip_norm_operators: float = 1.0
    wd_operators: float = 0.05
    fista_max_iters: int = 50
    variational: VariationalConfig = field(default_factory=VariationalConfig)
    encoder_hidden: tuple = (64, 64)
    lr_encoder: float = 1.0e-3
    wd_encoder: float = 1.0e-5
    clip_norm_encoder: float = 5.0
    log_scale_clamp: tuple = (-6.0, 2.0)
    encoder_head_scale: float = 0.0
    encoder_log_scale_bias: float = -2.3
    prior_shift: float = 0.05
    prior_scale: float = 0.01


@dataclass
class OperatorTrainResult:
    opdict: OperatorDictionary
    records: list
    encoder: MlpNet | None = None


def _fixed_prior(n: int, m: int, shift: float, scale: float) -> LaplacianParams:
    return LaplacianParams.from_scale(np.full((n, m), shift), np.full((n, m), scale))


def train_lie_operators(
    pairs,
    opdict: OperatorDictionary,
    inference: str,
    cfg: OperatorTrainConfig,
    rng: np.random.Generator,
    *,
    record_timing: bool = True,
) -> OperatorTrainResult:
    """Alternating minimization over point pairs.

    ``pairs`` is either a fixed PointPairBatch reused every epoch or a
    callable ``(epoch, rng) -> PointPairBatch``. Each epoch infers
    coefficients with frozen generators (FISTA, or best-of-many sampling from
    the amortized encoder), then takes one clipped decoupled-weight-decay
    step on the generators (and an optimizer step on the encoder when
    variational). The recorded mse/l1/kl are batch means; runtime is
    cumulative compute time.

    Raises:
        DivergenceError: if the epoch loss turns non-finite.
    """
    if inference not in ("fista", "variational"):
        raise ValueError("inference must be 'fista' or 'variational'")
    opdict = opdict.copy()
    var_cfg = cfg.variational
    encoder = None
    opt_encoder = None
    if inference == "variational":
        encoder = MlpNet(
            [2 * opdict.dim, *cfg.encoder_hidden], opdict.m, "laplacian",
            log_scale_clamp=cfg.log_scale_clamp,
            head_weight_scale=cfg.encoder_head_scale,
            log_scale_bias=cfg.encoder_log_scale_bias, rng=rng,
        )
        opt_encoder = AdamWState.for_net(encoder)
    records = []
    elapsed = 0.0
    for epoch in range(cfg.epochs):
        batch = pairs(epoch, rng) if callable(pairs) else pairs
        Z, Zp = batch.sources, batch.targets
        n = Z.shape[0]
        t0 = time.perf_counter()
        kl_mean = None
        if inference == "fista":
            C = fista_infer(opdict, Z, Zp, cfg.l1_weight, max_iters=cfg.fista_max_iters)
            m_losses, mg = manifold_loss_batch(opdict, Z, Zp, C)
        else:
            q_params, q_cache = encode_posterior(encoder, Z, Zp)
            bom = best_of_many_batch(opdict, Z, Zp, q_params, var_cfg, rng)
            C = bom.c
            m_losses, mg = manifold_loss_batch(opdict, Z, Zp, C)
            p_params = _fixed_prior(n, opdict.m, cfg.prior_shift, cfg.prior_scale)
            kl_mean = float(np.mean(np.sum(kl_laplacian_terms(q_params, p_params), axis=-1)))
            g_mu_q, g_b_q, _, _ = kl_laplacian_grads(q_params, p_params)
            beta = var_cfg.kl_weight
            d_shift = mg.d_c / n + (beta / n) * g_mu_q
            d_scale = (mg.d_c / n) * bom.noise + (beta / n) * g_b_q
            enc_grads = posterior_backward(encoder, q_cache, d_shift, d_scale)
            adamw_update(
                encoder, enc_grads, opt_encoder,
                lr=cfg.lr_encoder, weight_decay=cfg.wd_encoder,
                clip_norm=cfg.clip_norm_encoder,
            )
        mse = float(np.mean(m_losses))
        if not np.isfinite(mse):
            raise DivergenceError("non-finite manifold loss", iteration=epoch)
        di = _di_mean(m_losses, Z, Zp)
        d_ops = mg.d_ops / n + cfg.fro_weight * frobenius_penalty_grad(opdict)
        opdict = grad_clip_and_step(
            opdict, d_ops,
            lr=cfg.lr_operators,
            clip_norm=cfg.clip_norm_operators,
            weight_decay=cfg.wd_operators,
        )
        elapsed += time.perf_counter() - t0
        records.append(
            MetricsRecord(
                epoch=epoch,
                mse=mse,
                l1=float(np.mean(np.sum(np.abs(C), axis=1))),
                kl=kl_mean,
                di_mean=di,
                runtime_s=elapsed if record_timing else None,
                op_fro=[float(v) for v in operator_frobenius_norms(opdict)],
            )
        )
    return OperatorTrainResult(opdict=opdict, records=records, encoder=encoder)


def evaluate_operator_model(
    opdict: OperatorDictionary,
    eval_batch: PointPairBatch,
    *,
    inference: str,
    l1_weight: float = 0.6,
    fista_max_iters: int = 200,
    encoder: MlpNet | None = None,
    var_cfg: VariationalConfig | None = None,
    rng: np.random.Generator | None = None,
) -> dict:
    """Final-model transport quality on held-out pairs.

    Coefficients are inferred with the model's own inference route; returns
    mean mse, coefficient l1, and distance improvement.
    """
    Z, Zp = eval_batch.sources, eval_batch.targets
    if inference == "fista":
        C = fista_infer(opdict, Z, Zp, l1_weight, max_iters=fista_max_iters)
    elif inference == "variational":
        if encoder is None or var_cfg is None or rng is None:
            raise ValueError("variational evaluation needs encoder, var_cfg, and rng")
        q_params, _ = encode_posterior(encoder, Z, Zp)
        C = best_of_many_batch(opdict, Z, Zp, q_params, var_cfg, rng).c
    else:
        raise ValueError("inference must be 'fista' or 'variational'")
    losses = manifold_loss_values(opdict, Z, Zp, C)
    return {
        "mse": float(np.mean(losses)),
        "l1": float(np.mean(np.sum(np.abs(C), axis=1))),
        "di_mean": _di_mean(losses, Z, Zp),
    }


# ---------------------------------------------------------------------------
# Linear probe
# ---------------------------------------------------------------------------


@dataclass
class ProbeConfig:
    train_fraction: float = 0.8
    epochs: int = 300
    lr: float = 1.0e-2
    weight_decay: float = 1.0e-4
    seed: int = 0


def linear_probe(features: np.ndarray, labels: np.ndarray, cfg: ProbeConfig) -> float:
    """Train a linear softmax classifier on frozen features; held-out accuracy.

    The split is stratified per class and deterministic for a fixed seed.

    Raises:
        ValueError: if fewer than two classes are present.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if classes.size < 2:
        raise ValueError("linear probe needs at least two classes")
    rng = np.random.default_rng(cfg.seed)
    train_idx, test_idx = [], []
    for k in classes:
        idx = np.flatnonzero(labels == k)
        idx = idx[rng.permutation(idx.size)]
        cut = max(1, int(round(cfg.train_fraction * idx.size)))
        cut = min(cut, idx.size - 1) if idx.size > 1 else cut
        train_idx.extend(idx[:cut])
        test_idx.extend(idx[cut:])
    train_idx = np.sort(np.array(train_idx))
    test_idx = np.sort(np.array(test_idx))
    remap = {int(k): i for i, k in enumerate(classes)}
    y = np.array([remap[int(v)] for v in labels])

    net = MlpNet([features.shape[1]], classes.size, "plain", rng=rng)
    opt = AdamWState.for_net(net)
    for _ in range(cfg.epochs):
        logits, cache = net.forward(features[train_idx])
        _, d_logits = cross_entropy(logits, y[train_idx])
        grads, _ = net.backward(cache, d_logits)
        adamw_update(net, grads, opt, lr=cfg.lr, weight_decay=cfg.weight_decay)
    logits, _ = net.forward(features[test_idx])
    pred = np.argmax(logits, axis=1)
    return float(np.mean(pred == y[test_idx]))
