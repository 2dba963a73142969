"""Progressive three-stage training with frozen groups and resumable checkpoints."""
from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .. import store
from ..data.augment import AugmentConfig, augment, record_rng
from ..data.corpus import NameRecord
from ..data.text import Vocab, encode_batch
from ..model import PARAM_GROUPS, OnomasCNN
from ..nn import functional as F
from ..nn.rng import derive_key
from ..nn.tensor import Tensor, no_grad
from .optim import AdamW, NonFiniteGradient, OptimConfig, clip_gradients, one_cycle_lr

log = logging.getLogger(__name__)

TARGETS = ("cluster", "leaf", "joint")
FEATURE_GROUPS = {"embedding", "branches", "fusion"}


class TrainingError(RuntimeError):
    pass


class CheckpointMismatch(TrainingError):
    pass


@dataclass(frozen=True)
class FocalParams:
    alpha: float = 0.25
    gamma: float = 2.0

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must be in (0, 1]")
        if self.gamma < 0.0:
            raise ValueError("gamma must be >= 0")


@dataclass(frozen=True)
class Stage:
    name: str
    trainable: tuple[str, ...]
    epochs: int
    target: str

    def __post_init__(self):
        if self.target not in TARGETS:
            raise ValueError(f"unknown stage target {self.target!r}")
        bad = set(self.trainable) - set(PARAM_GROUPS)
        if bad:
            raise ValueError(f"unknown parameter groups {sorted(bad)}")

    @property
    def frozen(self) -> tuple[str, ...]:
        return tuple(g for g in PARAM_GROUPS if g not in self.trainable)


@dataclass(frozen=True)
class StagePlan:
    stages: tuple[Stage, ...]

    @classmethod
    def progressive(cls, epochs: Sequence[int] = (10, 10, 10)) -> "StagePlan":
        e1, e2, e3 = epochs
        first = ("embedding", "branches", "fusion", "cluster_head")
        return cls(
            (
                Stage("cluster", first, e1, "cluster"),
                Stage("leaf", ("leaf_heads",), e2, "leaf"),
                Stage("joint", PARAM_GROUPS, e3, "joint"),
            )
        )

    def validate(self) -> None:
        if len(self.stages) == 3:
            s1, s2, s3 = self.stages
            if set(s2.frozen) != set(s1.trainable):
                raise ValueError("stage 2 must freeze exactly the groups stage 1 trained")
            if s3.frozen:
                raise ValueError("stage 3 must not freeze anything")

    def digest(self) -> str:
        blob = json.dumps([asdict(s) for s in self.stages], sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class EpochLog:
    stage: int
    epoch: int
    loss: float
    val_acc: float
    lr: float
    clip_factor: float
    seconds: float = 0.0

    def tsv(self) -> str:
        return f"{self.stage}\t{self.epoch}\t{self.loss:.6f}\t{self.val_acc:.6f}\t{self.lr:.6e}\t{self.clip_factor:.6f}"


@dataclass
class TrainResult:
    model: OnomasCNN
    log: list[EpochLog]
    frozen_checks: dict[int, bool] = field(default_factory=dict)
    stopped_early: dict[int, bool] = field(default_factory=dict)
    interrupted: bool = False

    def summary(self) -> dict:
        return {
            "epochs": len(self.log),
            "final_val_acc": self.log[-1].val_acc if self.log else None,
            "frozen_checks": {str(k): v for k, v in self.frozen_checks.items()},
            "stopped_early": {str(k): v for k, v in self.stopped_early.items()},
            "interrupted": self.interrupted,
            "log": [asdict(e) for e in self.log],
        }


def _group_hash(model: OnomasCNN, groups: Sequence[str]) -> str:
    h = hashlib.blake2b(digest_size=16)
    for g in sorted(groups):
        for p in model.group(g):
            h.update(p.name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


def _cluster_weights(cluster_of_class: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """Inverse-frequency weights over clusters, same formula as for leaf classes."""
    k = cluster_of_class.max() + 1
    cc = np.bincount(cluster_of_class, weights=counts, minlength=k)
    seen = cc > 0
    w = np.full(k, 10.0)
    if seen.any():
        w[seen] = np.clip(cc.sum() / (seen.sum() * cc[seen]), 0.1, 10.0)
    return w


class Trainer:
    """Drives one model through a stage plan.

    Shuffling and every random draw (augmentation, dropout) are keyed by
    ``(seed, stage, epoch, record index)``, so a run can be interrupted
    after any epoch and resumed to bit-identical parameters.
    """

    def __init__(
        self,
        model: OnomasCNN,
        train_records: Sequence[NameRecord],
        val_records: Sequence[NameRecord],
        plan: StagePlan,
        optim: OptimConfig = OptimConfig(),
        augment_config: AugmentConfig | None = AugmentConfig(),
        focal: FocalParams = FocalParams(),
        class_weights: np.ndarray | None = None,
        vocab: Vocab | None = None,
        patience: int = 5,
        seed: int = 0,
    ):
        plan.validate()
        self.model = model
        self.tax = model.taxonomy
        self.vocab = vocab or model.vocab
        if self.vocab is None:
            raise ValueError("training needs a vocabulary")
        self.train_records = list(train_records)
        self.val_records = list(val_records)
        self.plan = plan
        self.optim_config = optim
        self.augment_config = augment_config
        self.focal = focal
        self.patience = patience
        self.seed = seed
        self.targets = np.array([r.class_id(self.tax) for r in self.train_records], dtype=np.int64)
        counts = np.bincount(self.targets, minlength=self.tax.n_classes).astype(np.float64)
        if class_weights is None:
            self.class_weights = np.ones(self.tax.n_classes)
            self.cluster_weights = np.ones(self.tax.n_clusters)
        else:
            self.class_weights = np.asarray(class_weights, dtype=np.float64)
            self.cluster_weights = _cluster_weights(self.tax.class_cluster, counts)
        self.val_ids = None
        if self.val_records:
            self.val_ids = encode_batch([r.raw for r in self.val_records], self.vocab, model.config.max_len)
            self.val_targets = np.array([r.class_id(self.tax) for r in self.val_records], dtype=np.int64)

        # progress, all of it checkpointed
        self.stage_idx = 0
        self.epoch = 0
        self.log: list[EpochLog] = []
        self.optimizer = AdamW(model.params, optim)
        self.best_acc = -1.0
        self.bad_epochs = 0
        self.frozen_hashes: dict[int, str] = {}
        self.frozen_checks: dict[int, bool] = {}
        self.stopped_early: dict[int, bool] = {}

    # ------------------------------------------------------------- helpers

    @property
    def steps_per_epoch(self) -> int:
        return max(1, math.ceil(len(self.train_records) / self.optim_config.effective_batch))

    def _enter_stage(self, s: int) -> None:
        stage = self.plan.stages[s]
        for g in PARAM_GROUPS:
            self.model.set_trainable([g], g in stage.trainable)
        self.frozen_hashes[s] = _group_hash(self.model, stage.frozen)

    def _epoch_texts(self, s: int, epoch: int, order: np.ndarray) -> list[str]:
        out = []
        for i in order:
            r = self.train_records[i]
            if self.augment_config is not None:
                r = augment(r, self.augment_config, record_rng(self.augment_config.seed, s * 100_003 + epoch, int(i)))
            out.append(r.raw)
        return out

    def _loss(self, stage: Stage, ids, lengths, targets, training, step_key, row_keys):
        m, p = self.model, self.model.params
        if FEATURE_GROUPS & set(stage.trainable):
            feat = m.features(ids, lengths, training, step_key, row_keys)
        else:
            # nothing upstream of the heads is trainable; skip building that graph
            with no_grad():
                feat = Tensor(m.features(ids, lengths, training, step_key, row_keys).data)
        cl = F.linear(feat, p["cluster_head.weight"], p["cluster_head.bias"])
        if stage.target == "cluster":
            ct = self.tax.class_cluster[targets]
            return F.focal_loss(F.softmax(cl), ct, self.focal.alpha, self.focal.gamma, self.cluster_weights)
        leaf = [F.linear(feat, p[f"leaf_head{k}.weight"], p[f"leaf_head{k}.bias"]) for k in range(self.tax.n_clusters)]
        probs = F.hierarchical_probs(cl, leaf, self.tax.leaf_index, self.tax.n_classes)
        return F.focal_loss(probs, targets, self.focal.alpha, self.focal.gamma, self.class_weights)

    def evaluate(self, target: str = "leaf") -> float:
        if self.val_ids is None:
            return float("nan")
        ids, lengths = self.val_ids
        correct = 0
        bs = 512
        for lo in range(0, len(ids), bs):
            width = int(lengths[lo : lo + bs].max())
            probs = self.model.predict_proba(ids[lo : lo + bs, :width], lengths[lo : lo + bs])
            pred = np.argmax(probs, axis=1)
            truth = self.val_targets[lo : lo + bs]
            if target == "cluster":
                pred, truth = self.tax.class_cluster[pred], self.tax.class_cluster[truth]
            correct += int((pred == truth).sum())
        return correct / len(ids)

    # ---------------------------------------------------------------- loop

    def run_epoch(self) -> EpochLog:
        s, epoch = self.stage_idx, self.epoch
        stage = self.plan.stages[s]
        oc = self.optim_config
        t0 = time.perf_counter()
        order = np.random.default_rng([self.seed, 0x0DE2, s, epoch]).permutation(len(self.train_records))
        texts = self._epoch_texts(s, epoch, order)
        ids_all, len_all = encode_batch(texts, self.vocab, self.model.config.max_len)
        total_steps = stage.epochs * self.steps_per_epoch
        step_key = int(derive_key(self.seed, s, epoch))
        eff = oc.effective_batch
        losses, lr, clip = [], 0.0, 1.0
        for step in range(self.steps_per_epoch):
            lo, hi = step * eff, min((step + 1) * eff, len(order))
            if lo >= hi:
                break
            self.model.zero_grad()
            batch_loss = 0.0
            for mlo in range(lo, hi, oc.micro_batch):
                mhi = min(mlo + oc.micro_batch, hi)
                width = int(len_all[mlo:mhi].max())
                idx = order[mlo:mhi]
                loss = self._loss(
                    stage,
                    ids_all[mlo:mhi, :width],
                    len_all[mlo:mhi],
                    self.targets[idx],
                    True,
                    step_key,
                    idx.astype(np.uint64),
                )
                share = (mhi - mlo) / (hi - lo)
                F.scale(loss, share).backward()
                batch_loss += float(loss.data) * share
            clip = clip_gradients(self.model.params.values(), oc.clip_norm)
            lr = one_cycle_lr(epoch * self.steps_per_epoch + step, total_steps, oc)
            self.optimizer.step(lr)
            losses.append(batch_loss)
        val_acc = self.evaluate("cluster" if stage.target == "cluster" else "leaf")
        if not np.isfinite(val_acc) and self.val_ids is not None:
            raise TrainingError(f"validation accuracy is NaN at stage {s} epoch {epoch}")
        entry = EpochLog(s, epoch, float(np.mean(losses)), val_acc, lr, clip, time.perf_counter() - t0)
        self.log.append(entry)
        return entry

    def fit(
        self,
        checkpoint: str | Path | None = None,
        stop_after_epochs: int | None = None,
        log_path: str | Path | None = None,
    ) -> TrainResult:
        """Run (or continue) the plan. ``stop_after_epochs`` simulates an interruption."""
        done = 0
        log_fh = open(log_path, "a", encoding="utf-8") if log_path else None
        interrupted = False
        try:
            while self.stage_idx < len(self.plan.stages):
                s = self.stage_idx
                stage = self.plan.stages[s]
                if self.epoch == 0 and s not in self.frozen_hashes:
                    self._enter_stage(s)
                    self.optimizer = AdamW(self.model.params, self.optim_config)
                    self.best_acc, self.bad_epochs = -1.0, 0
                else:
                    for g in PARAM_GROUPS:
                        self.model.set_trainable([g], g in stage.trainable)
                stop = False
                while self.epoch < stage.epochs and not stop:
                    if stop_after_epochs is not None and done >= stop_after_epochs:
                        interrupted = True
                        break
                    try:
                        entry = self.run_epoch()
                    except (TrainingError, NonFiniteGradient):
                        if checkpoint:
                            self.save_checkpoint(Path(str(checkpoint) + ".dump"))
                        raise
                    log.info("stage %d epoch %d loss %.4f val_acc %.4f", s, entry.epoch, entry.loss, entry.val_acc)
                    if log_fh:
                        log_fh.write(entry.tsv() + "\n")
                        log_fh.flush()
                    self.epoch += 1
                    done += 1
                    if entry.val_acc > self.best_acc:
                        self.best_acc, self.bad_epochs = entry.val_acc, 0
                    else:
                        self.bad_epochs += 1
                        if self.bad_epochs >= self.patience:
                            stop = True
                            self.stopped_early[s] = True
                    if checkpoint:
                        self.save_checkpoint(checkpoint)
                if interrupted:
                    break
                self.frozen_checks[s] = _group_hash(self.model, stage.frozen) == self.frozen_hashes[s]
                if not self.frozen_checks[s]:
                    raise TrainingError(f"frozen parameters changed during stage {s}")
                self.stage_idx += 1
                self.epoch = 0
                if checkpoint:
                    self.save_checkpoint(checkpoint)
        finally:
            if log_fh:
                log_fh.close()
        for g in PARAM_GROUPS:
            self.model.set_trainable([g], True)
        return TrainResult(self.model, list(self.log), dict(self.frozen_checks), dict(self.stopped_early), interrupted)

    # ---------------------------------------------------------- checkpoints

    def _identity(self) -> dict:
        return {
            "plan": self.plan.digest(),
            "optim": self.optim_config.to_dict(),
            "augment_seed": None if self.augment_config is None else self.augment_config.seed,
            "augment_rates": None
            if self.augment_config is None
            else [self.augment_config.cap_rate, self.augment_config.title_abbrev_rate, self.augment_config.noise_rate],
            "focal": asdict(self.focal),
            "seed": self.seed,
            "n_train": len(self.train_records),
            "patience": self.patience,
        }

    def save_checkpoint(self, path: str | Path) -> None:
        mf = store.model_file(self.model, flags=store.FLAG_CHECKPOINT)
        opt = self.optimizer.state_dict()
        mf.optim = {f"m/{k}": v for k, v in opt["m"].items()} | {f"v/{k}": v for k, v in opt["v"].items()}
        mf.train_state = {
            "identity": self._identity(),
            "stage": self.stage_idx,
            "epoch": self.epoch,
            "adam_t": opt["t"],
            "best_acc": self.best_acc,
            "bad_epochs": self.bad_epochs,
            "frozen_hashes": {str(k): v for k, v in self.frozen_hashes.items()},
            "frozen_checks": {str(k): v for k, v in self.frozen_checks.items()},
            "stopped_early": {str(k): v for k, v in self.stopped_early.items()},
            "log": [asdict(e) for e in self.log],
        }
        store.write_atomic(path, store.encode(mf))

    def resume(self, path: str | Path) -> None:
        """Restore progress; refuses checkpoints written under a different plan or seeds."""
        mf = store.read_file(path)
        if not mf.flags & store.FLAG_CHECKPOINT or mf.train_state is None:
            raise CheckpointMismatch(f"{path} is a model file, not a training checkpoint")
        ts = mf.train_state
        mine, theirs = self._identity(), ts["identity"]
        diffs = sorted(k for k in set(mine) | set(theirs) if mine.get(k) != theirs.get(k))
        if diffs:
            details = ", ".join(f"{k}: checkpoint={theirs.get(k)!r} current={mine.get(k)!r}" for k in diffs)
            raise CheckpointMismatch(f"checkpoint was written under a different setup ({details})")
        restored = store.build_model(mf)
        self.model.load_state(restored.state())
        self.stage_idx, self.epoch = int(ts["stage"]), int(ts["epoch"])
        self.best_acc, self.bad_epochs = float(ts["best_acc"]), int(ts["bad_epochs"])
        self.frozen_hashes = {int(k): v for k, v in ts["frozen_hashes"].items()}
        self.frozen_checks = {int(k): v for k, v in ts["frozen_checks"].items()}
        self.stopped_early = {int(k): v for k, v in ts["stopped_early"].items()}
        self.log = [EpochLog(**e) for e in ts["log"]]
        self.optimizer = AdamW(self.model.params, self.optim_config)
        self.optimizer.load_state_dict(
            {
                "t": ts["adam_t"],
                "m": {k[2:]: v for k, v in mf.optim.items() if k.startswith("m/")},
                "v": {k[2:]: v for k, v in mf.optim.items() if k.startswith("v/")},
            }
        )
        s = self.stage_idx
        if s < len(self.plan.stages) and s in self.frozen_hashes:
            stage = self.plan.stages[s]
            if _group_hash(self.model, stage.frozen) != self.frozen_hashes[s]:
                raise CheckpointMismatch(f"frozen groups of stage {s} do not match their recorded hashes")


def train(
    model: OnomasCNN,
    train_records: Sequence[NameRecord],
    val_records: Sequence[NameRecord],
    plan: StagePlan | None = None,
    optim: OptimConfig = OptimConfig(),
    augment_config: AugmentConfig | None = AugmentConfig(),
    **kwargs,
) -> TrainResult:
    fit_keys = {"checkpoint", "stop_after_epochs", "log_path"}
    fit_kw = {k: kwargs.pop(k) for k in list(kwargs) if k in fit_keys}
    trainer = Trainer(model, train_records, val_records, plan or StagePlan.progressive(), optim, augment_config, **kwargs)
    return trainer.fit(**fit_kw)
