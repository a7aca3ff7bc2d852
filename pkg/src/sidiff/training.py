"""End-to-end pipeline pieces: tokenization, training loop and evaluation."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
import torch

from sidiff import decoding, noising
from sidiff.config import RunConfig
from sidiff.dataset import (
    InteractionLog,
    ItemEmbeddingTable,
    SemanticId,
    SplitSpec,
    TrainingInstance,
    eval_instances,
    leave_last_out,
    sliding_window_expand,
)
from sidiff.errors import DataError
from sidiff.metrics import DEFAULT_KS, EarlyStopper, EvalOutcome, TrainTrace, score_instance, validation_score
from sidiff.network import SidDiffusionModel, build_model, view_loss
from sidiff.tokenizer import CodebookSet, fit_pse, fit_rq_kmeans, random_tokenize, tokenize

log = logging.getLogger(__name__)


def fit_tokenizer(
    table: ItemEmbeddingTable, cfg: RunConfig
) -> tuple[dict[str, SemanticId], CodebookSet | None]:
    if cfg.tokenizer == "random":
        return random_tokenize(table.ids, cfg.n, cfg.M, cfg.tok_seed), None
    if cfg.tokenizer == "rq":
        cbs = fit_rq_kmeans(table, cfg.n, cfg.M, seed=cfg.tok_seed)
    else:
        cbs = fit_pse(table, cfg.n, cfg.M, iters=cfg.tok_iters, seed=cfg.tok_seed)
    return tokenize(table, cbs), cbs


@dataclass
class PreparedData:
    split: SplitSpec
    sids: dict[str, SemanticId]
    train: list[TrainingInstance]
    valid: list[TrainingInstance]
    test: list[TrainingInstance]

    @property
    def catalog(self) -> set[SemanticId]:
        return set(self.sids.values())

    def items_by_sid(self) -> dict[SemanticId, list[str]]:
        out: dict[SemanticId, list[str]] = {}
        for item, sid in self.sids.items():
            out.setdefault(sid, []).append(item)
        return out


def prepare(log_: InteractionLog, sids: Mapping[str, SemanticId], L_input: int) -> PreparedData:
    missing = sorted(log_.items - set(sids))
    if missing:
        raise DataError(f"{len(missing)} logged items have no semantic ID, e.g. {missing[0]!r}")
    split = leave_last_out(log_)
    return PreparedData(
        split=split,
        sids=dict(sids),
        train=sliding_window_expand(split, sids, L_input),
        valid=eval_instances(split, sids, L_input, "valid"),
        test=eval_instances(split, sids, L_input, "test"),
    )


def _batch_views(
    model: SidDiffusionModel,
    state,
    targets: torch.Tensor,
    cfg: RunConfig,
    rng: np.random.Generator,
) -> np.ndarray:
    B, n = targets.shape
    schedule = cfg.mask_schedule
    strategy = cfg.strategy
    if strategy == "random":
        return noising.batch_random_masks(B, n, cfg.random_views, rng)
    if strategy == "coherent-k":
        return noising.batch_coherent_masks(B, n, schedule, cfg.coherent_k, rng)
    policy = "most" if strategy in ("ocn-ms", "ocn-mr") else "least"
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            if strategy in ("ocn-lr", "ocn-mr"):
                orders = noising.batch_refresh_orders(model, state, targets, policy)
                return noising.orders_to_masks(orders, schedule)
            probs = noising.probe_probs(model, state)
    finally:
        model.train(was_training)
    if strategy == "ocn-stochastic":
        return noising.batch_stochastic_masks(probs, schedule, rng)
    return noising.orders_to_masks(noising.batch_static_orders(probs, policy), schedule)


def _detached(state):
    from sidiff.network import EncoderState

    return EncoderState(
        h=state.h.detach(),
        key_valid=state.key_valid,
        kv=[(k.detach(), v.detach()) for k, v in state.kv],
    )


@torch.no_grad()
def decode_instances(
    model: SidDiffusionModel,
    instances: Sequence[TrainingInstance],
    cfg: RunConfig,
    catalog: set[SemanticId] | None,
) -> list[decoding.DecodeResult]:
    """Top-K per instance; catalog filtering runs before the cut to K."""
    model.eval()
    if not instances:
        return []
    state = model.encode([inst.context for inst in instances])
    order = None
    if cfg.decoder == "fixed":
        order = [int(v) for v in np.random.default_rng(cfg.order_seed).permutation(cfg.n)]
    keep = max(cfg.K, cfg.B_act) if catalog is not None else cfg.K
    results = []
    for i in range(len(instances)):
        one = state.select([i])
        if order is None:
            res = decoding.cpd_decode(model, one, cfg.B_act, keep)
        else:
            res = decoding.fixed_order_beam(model, one, order, cfg.B_act, keep)
        if catalog is not None:
            res = decoding.filter_to_catalog(res, catalog)
        res.candidates = res.candidates[:cfg.K]
        results.append(res)
    return results


def evaluate(
    model: SidDiffusionModel,
    instances: Sequence[TrainingInstance],
    cfg: RunConfig,
    catalog: set[SemanticId] | None,
    Ks: Sequence[int] = DEFAULT_KS,
) -> EvalOutcome:
    results = decode_instances(model, instances, cfg, catalog)
    scores = [score_instance(r.sids, inst.target, Ks) for r, inst in zip(results, instances)]
    return EvalOutcome.aggregate(scores, Ks)


def train(
    cfg: RunConfig,
    data: PreparedData,
    model: SidDiffusionModel | None = None,
    progress: bool = False,
) -> tuple[SidDiffusionModel, TrainTrace]:
    """AdamW with linear warmup, early stopping on the validation score.

    Returns the model restored to its best-validation weights.
    """
    if not data.train:
        raise DataError("no training instances (every user needs at least 4 interactions)")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    model = model if model is not None else build_model(cfg.model_config(), seed=cfg.seed)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda step: min(1.0, (step + 1) / cfg.warmup))
    catalog = data.catalog if cfg.catalog_filter else None
    trace = TrainTrace(views_per_sample_per_epoch=cfg.views_per_sample)
    stopper = EarlyStopper(cfg.patience)
    best_state = copy.deepcopy(model.state_dict())

    contexts = [inst.context for inst in data.train]
    targets = torch.tensor([list(inst.target) for inst in data.train], dtype=torch.long)
    for epoch in range(1, cfg.max_epochs + 1):
        model.train()
        perm = rng.permutation(len(data.train))
        total, seen = 0.0, 0
        for lo in range(0, len(perm), cfg.batch_size):
            idx = perm[lo:lo + cfg.batch_size]
            state = model.encode([contexts[i] for i in idx])
            tgt = targets[idx]
            views = _batch_views(model, _detached(state), tgt, cfg, rng)
            loss = view_loss(model, state, tgt, torch.from_numpy(views), cfg.alpha)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sched.step()
            total += float(loss.detach()) * len(idx)
            seen += len(idx)
        outcome = evaluate(model, data.valid, cfg, catalog)
        score = validation_score(outcome)
        trace.losses.append(total / seen)
        trace.scores.append(score)
        stop = stopper.update(score)
        if stopper.improved:
            best_state = copy.deepcopy(model.state_dict())
        if progress:
            log.info(
                "epoch %d loss %.4f recall@10 %.4f ndcg@10 %.4f",
                epoch, total / seen, outcome.recall_at[10], outcome.ndcg_at[10],
            )
        if stop:
            trace.stopped_epoch = epoch
            break
    trace.best_epoch = stopper.best_epoch
    model.load_state_dict(best_state)
    model.eval()
    return model, trace
