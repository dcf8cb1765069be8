"""Joint optimization of network weights and graph structure.

Each epoch every training sample is (optionally) augmented and turned into a
base graph. Once the warm-up is over, the mutation net moves the coarse nodes
(``mutate -> enforce -> refresh``) once per epoch, and that committed graph is
what the network sees for the rest of the epoch. The mutation net still
receives gradients: committed positions enter the tape as
``committed + (xi(base) - stop_grad(xi(base)))``, so the value equals the
committed graph while the derivative flows into the mutation parameters.
"""
from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .autodiff import Tape
from .data import (
    AUGMENT_OPS, augment, build_node_targets, reconstruct_mask,
)
from .gat import GatModel, ModelConfig, forward_tensors, init_model, min_layers
from .graph import Arcs, build_base_graph, project_features
from .losses import FocalParams, node_loss
from .metrics import EvalReport, aggregate, evaluate_masks
from .neuroplastic import (
    MutationConfig, MutationNet, enforce_constraints, mutate_positions,
    mutation_tape_positions, refresh_features,
)

logger = logging.getLogger(__name__)

CHECKPOINT_SCHEMA = 2
NEVER = 10**9  # warm-up value that disables mutation


class TrainingAborted(RuntimeError):
    def __init__(self, message, sample_ids=()):
        super().__init__(message)
        self.sample_ids = list(sample_ids)


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 50
    lr: float = 1e-3
    optimizer: str = "adam"  # or "sgd"
    batch_size: int = 8
    seed: int = 0
    loss: str = "fl_mb"  # bce | focal | fl_mb
    gamma: float = 2.0
    alpha: float = 0.25
    levels: int = 3
    factor: int = 2
    size: int = 32
    # mutation
    mutation: bool = True
    warmup: int = 5
    iterations: int = 2
    min_valid_fraction: float = 0.25
    refresh: bool = True
    position_mode: str = "xi"  # xi | direct
    xi_hidden: int = 16
    xi_identity_init: bool = True
    # network
    hidden: int = 32
    layers: int = 6
    heads: int = 1
    dropout: float = 0.1
    aggregator: str = "gat"
    positional_attention: bool = True
    # data
    augment: list = field(default_factory=lambda: list(AUGMENT_OPS))
    threshold: float = 0.5
    eval_every: int = 0
    record_timing: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.lr >= 0:
            raise ValueError("lr must be >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.loss not in ("bce", "focal", "fl_mb"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.position_mode not in ("xi", "direct"):
            raise ValueError(f"unknown position_mode {self.position_mode!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        self.augment = list(self.augment)
        unknown = set(self.augment) - set(AUGMENT_OPS)
        if unknown:
            raise ValueError(f"unknown augmentation ops {sorted(unknown)}")

    @classmethod
    def keys(cls):
        return [f.name for f in fields(cls)]

    def model_config(self):
        return ModelConfig(
            hidden=self.hidden, layers=self.layers, heads=self.heads,
            dropout=self.dropout, aggregator=self.aggregator,
            positional_attention=self.positional_attention,
        )

    def mutation_config(self):
        return MutationConfig(self.iterations, self.min_valid_fraction, self.refresh)

    def focal_params(self):
        return FocalParams(gamma=self.gamma, alpha=self.alpha)

    def mutation_active(self, epoch):
        return self.mutation and epoch >= self.warmup


@dataclass
class TrainLogRecord:
    epoch: int
    loss: float
    lr: float
    mutation_violations: int
    violations: list = field(default_factory=list)
    eval: dict = None
    wall_time: float = None

    def to_json(self):
        d = asdict(self)
        if d["wall_time"] is None:
            del d["wall_time"]
        return json.dumps(d, sort_keys=True)


# ----------------------------------------------------------------------
# optimizers


class Adam:
    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m, self.v, self.t = {}, {}, {}

    def step(self, params, grads, lr=None):
        lr = self.lr if lr is None else lr
        for k, g in grads.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
                self.t[k] = 0
            self.t[k] += 1
            t = self.t[k]
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            if lr == 0:
                continue
            mh = self.m[k] / (1 - self.beta1**t)
            vh = self.v[k] / (1 - self.beta2**t)
            params[k] = params[k] - lr * mh / (np.sqrt(vh) + self.eps)

    def state(self):
        return {
            k: {"m": self.m[k].reshape(-1).tolist(), "v": self.v[k].reshape(-1).tolist(),
                "shape": list(self.m[k].shape), "t": self.t[k]}
            for k in sorted(self.m)
        }

    def load_state(self, state):
        for k, s in state.items():
            self.m[k] = np.array(s["m"]).reshape(s["shape"])
            self.v[k] = np.array(s["v"]).reshape(s["shape"])
            self.t[k] = int(s["t"])


class SGD:
    def __init__(self, lr=1e-3):
        self.lr = lr

    def step(self, params, grads, lr=None):
        lr = self.lr if lr is None else lr
        if lr == 0:
            return
        for k, g in grads.items():
            params[k] = params[k] - lr * g

    def state(self):
        return {}

    def load_state(self, state):
        pass


def make_optimizer(config):
    return Adam(config.lr) if config.optimizer == "adam" else SGD(config.lr)


# ----------------------------------------------------------------------
# graph preparation


@dataclass
class PreparedGraph:
    sample_id: str
    base: object  # default-position graph with projected colors
    graph: object  # graph the network sees (committed mutation, if any)
    targets: np.ndarray
    mask: np.ndarray = None
    sample: object = None
    violations: list = field(default_factory=list)


def base_graph_for(sample, levels, factor):
    g = build_base_graph(sample.mask.shape[0], sample.mask.shape[1], levels, factor)
    return project_features(g, sample.image)


def prepare(sample, config, net=None, mutate=False, positions=None):
    """Base graph, committed graph and node targets for one sample."""
    base = base_graph_for(sample, config.levels, config.factor)
    graph, report = base, []
    mcfg = config.mutation_config()
    if positions is not None:
        graph = base.copy()
        graph.positions[graph.mobile] = positions[graph.mobile]
        graph, report = enforce_constraints(graph, mcfg)
        graph = refresh_features(graph)
    elif mutate and net is not None:
        graph = mutate_positions(base, net, mcfg)
        graph, report = enforce_constraints(graph, mcfg)
        graph = refresh_features(graph)
    targets, _ = build_node_targets(graph, sample.mask)
    return PreparedGraph(sample.source_id, base, graph, targets, sample.mask, sample, report)


class Trainer:
    """Holds model, mutation net and optimizer state across epochs."""

    def __init__(self, config, model=None, net=None):
        self.config = config
        if min_layers(config.levels) > config.layers:
            raise ValueError(
                f"{config.layers} layers cannot reach all {config.levels} magnification levels"
            )
        seeds = np.random.SeedSequence(config.seed).spawn(3)
        self.model = model or init_model(config.model_config(), seed=int(seeds[0].generate_state(1)[0]))
        self.net = net or MutationNet.init(
            config.xi_hidden, seed=int(seeds[1].generate_state(1)[0]),
            identity_fit=config.xi_identity_init,
        )
        self.optimizer = make_optimizer(config)
        self.epoch = 0
        self.positions = {}  # sample id -> (N, 3) committed positions
        self.mutation_rounds = 0
        self.log = []

    # -- one optimization step over a batch of prepared graphs
    def _step_loss(self, batch, rng, active, lr_scale=1.0, dry=False):
        config = self.config
        tape = Tape()
        mp = {k: tape.leaf(v) for k, v in self.model.params.items()}
        xp = {k: tape.leaf(v) for k, v in self.net.params.items()} if active and config.position_mode == "xi" else None
        direct = {}
        feats, poss, arcs_list, targets = [], [], [], []
        for pg in batch:
            g = pg.graph
            lvl0 = ~g.mobile
            if active and g.mobile.any():
                if config.position_mode == "xi":
                    _, moved = mutation_tape_positions(tape, self.net, pg.base, config.mutation_config(), xp)
                    mob = tape.const(g.positions[g.mobile]) + (moved - tape.const(moved.values))
                else:
                    mob = tape.leaf(g.positions[g.mobile])
                    direct[pg.sample_id] = mob
                pos = tape.concat([tape.const(g.positions[lvl0]), mob], axis=0)
            else:
                pos = tape.const(g.positions)
            x = tape.concat([tape.const(g.colors), tape.const(g.m_hat[:, None]), pos], axis=1)
            feats.append(x)
            poss.append(pos)
            arcs_list.append(g.arcs())
            targets.append(pg.targets)
        X = tape.concat(feats, axis=0) if len(feats) > 1 else feats[0]
        P = tape.concat(poss, axis=0) if len(poss) > 1 else poss[0]
        arcs = Arcs.concat(arcs_list) if len(arcs_list) > 1 else arcs_list[0]
        prob, _ = forward_tensors(tape, self.model, X, P, arcs, mp, train=True, rng=rng)
        loss = node_loss(config.loss, tape, P, np.concatenate(targets), prob, config.focal_params())
        value = float(loss.values)
        if not math.isfinite(value):
            return value
        if dry:
            return value
        tape.backward(loss)
        lr = config.lr * lr_scale
        self.optimizer.step(self.model.params, {k: t.grad for k, t in mp.items()}, lr)
        if xp is not None:
            self._step_prefixed(self.net.params, "xi.", {k: t.grad for k, t in xp.items()}, lr)
        for sid, t in direct.items():
            self._step_direct(sid, batch, t.grad, lr)
        return value

    def _step_prefixed(self, params, prefix, grads, lr):
        shadow = {prefix + k: v for k, v in params.items()}
        self.optimizer.step(shadow, {prefix + k: g for k, g in grads.items()}, lr)
        for k in params:
            params[k] = shadow[prefix + k]

    def _step_direct(self, sid, batch, grad, lr):
        pg = next(p for p in batch if p.sample_id == sid)
        g = pg.graph
        shadow = {f"pos.{sid}": g.positions[g.mobile]}
        self.optimizer.step(shadow, {f"pos.{sid}": grad}, lr)
        new = g.positions.copy()
        new[g.mobile] = np.clip(shadow[f"pos.{sid}"], 0.0, 1.0)
        self.positions[sid] = new
        g.positions = new

    def _prepare_epoch(self, dataset, epoch, active):
        config = self.config
        prepared, violations = [], []
        for k, sample in enumerate(dataset):
            if config.augment:
                sample = augment(sample, seed=(config.seed, epoch, k), ops=config.augment)
            if active and config.position_mode == "direct":
                pos = self.positions.get(sample.source_id)
                pg = prepare(sample, config, positions=pos) if pos is not None else prepare(sample, config)
            else:
                pg = prepare(sample, config, self.net, mutate=active)
            if active:
                self.positions[pg.sample_id] = pg.graph.positions.copy()
            if pg.violations:
                violations.append({
                    "sample": pg.sample_id,
                    "nodes": [v["node"] for v in pg.violations],
                    "reasons": sorted({v["reason"] for v in pg.violations}),
                })
            prepared.append(pg)
        return prepared, violations

    def train_epoch(self, dataset, val=None):
        config = self.config
        epoch = self.epoch
        t0 = time.perf_counter()
        active = config.mutation_active(epoch)
        prepared, violations = self._prepare_epoch(dataset, epoch, active)
        if active:
            self.mutation_rounds += 1
        rng = np.random.default_rng([config.seed, epoch, 7])
        order = rng.permutation(len(prepared))
        losses = []
        for s in range(0, len(order), config.batch_size):
            batch = [prepared[i] for i in order[s:s + config.batch_size]]
            step_rng = np.random.default_rng([config.seed, epoch, s, 11])
            value = self._step_loss(batch, step_rng, active)
            if not math.isfinite(value):
                # declared policy: halve the learning rate and retry once
                step_rng = np.random.default_rng([config.seed, epoch, s, 11])
                value = self._step_loss(batch, step_rng, active, lr_scale=0.5)
                if not math.isfinite(value):
                    ids = [p.sample_id for p in batch]
                    raise TrainingAborted(f"non-finite loss at epoch {epoch} for {ids}", ids)
            losses.append(value * len(batch))
        record = TrainLogRecord(
            epoch=epoch,
            loss=float(np.sum(losses) / len(prepared)),
            lr=config.lr,
            mutation_violations=int(sum(len(v["nodes"]) for v in violations)),
            violations=violations,
        )
        if val is not None and config.eval_every and (epoch + 1) % config.eval_every == 0:
            _, agg = evaluate(val, self.model, self.net, config, self.mutation_rounds > 0)
            record.eval = agg["overall"]
        if config.record_timing:
            record.wall_time = time.perf_counter() - t0
        self.log.append(record)
        self.epoch += 1
        return record

    def fit(self, dataset, val=None, epochs=None, log_path=None):
        if not dataset:
            raise ValueError("training dataset is empty")
        epochs = self.config.epochs if epochs is None else epochs
        fh = open(log_path, "a") if log_path else None
        try:
            for _ in range(epochs):
                rec = self.train_epoch(dataset, val)
                logger.info("epoch %d loss %.6f", rec.epoch, rec.loss)
                if fh:
                    fh.write(rec.to_json() + "\n")
                    fh.flush()
        finally:
            if fh:
                fh.close()
        return self

    @property
    def mutated(self):
        return self.mutation_rounds > 0


def train(dataset, config, val=None, log_path=None):
    """Train from scratch; returns the :class:`Trainer` (model, net, log)."""
    return Trainer(config).fit(dataset, val=val, log_path=log_path)


# ----------------------------------------------------------------------
# evaluation


def predict_sample(sample, model, net, config, mutated):
    pg = prepare(sample, config, net, mutate=mutated and config.mutation)
    tape = Tape()
    g = pg.graph
    prob, records = forward_tensors(
        tape, model, tape.const(g.features()), tape.const(g.positions), g.arcs()
    )
    return pg, prob.values, records


def evaluate(dataset, model, net, config, mutated, probabilities=None):
    """Per-sample :class:`EvalReport` list and aggregate.

    ``probabilities`` (sample id -> node probabilities) bypasses the network.
    """
    reports = []
    for sample in dataset:
        if probabilities is not None:
            pg = prepare(sample, config)
            probs = probabilities[sample.source_id]
        else:
            pg, probs, _ = predict_sample(sample, model, net, config, mutated)
        binary, raw = reconstruct_mask(pg.graph, probs, config.threshold)
        reports.append(evaluate_masks(
            sample.mask, sample.instances, raw, binary,
            sample_id=sample.source_id, class_tag=sample.class_tag,
        ))
    return reports, aggregate(reports)


def write_reports(reports, agg, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    doc = {"aggregate": agg, "samples": [r.to_dict() for r in reports]}
    with open(os.path.join(out_dir, "report.json"), "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
    with open(os.path.join(out_dir, "thresholds.csv"), "w") as fh:
        fh.write("threshold,tp,fp,fn,precision,recall,score\n")
        for r in agg.get("thresholds", []):
            fh.write(
                f"{r['threshold']:.2f},{r['tp']},{r['fp']},{r['fn']},"
                f"{r['precision']!r},{r['recall']!r},{r['score']!r}\n"
            )


# ----------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, trainer):
    doc = {
        "schema_version": CHECKPOINT_SCHEMA,
        "config": asdict(trainer.config),
        "epoch": trainer.epoch,
        "mutation_rounds": trainer.mutation_rounds,
        "model": trainer.model.to_dict(),
        "mutation_net": {
            k: {"shape": list(v.shape), "data": v.reshape(-1).tolist()}
            for k, v in trainer.net.params.items()
        },
        "positions": {
            sid: {"shape": list(p.shape), "data": p.reshape(-1).tolist()}
            for sid, p in sorted(trainer.positions.items())
        },
        "optimizer": trainer.optimizer.state(),
    }
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(doc, fh)
    os.replace(tmp, path)


def load_checkpoint(path):
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise CheckpointError(f"no checkpoint at {path}") from None
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from None
    if not isinstance(doc, dict) or "schema_version" not in doc:
        raise CheckpointError(f"{path} is not a checkpoint")
    if doc["schema_version"] != CHECKPOINT_SCHEMA:
        raise CheckpointError(
            f"checkpoint schema version {doc['schema_version']} != supported {CHECKPOINT_SCHEMA}"
        )
    try:
        config = TrainConfig(**doc["config"])
        model = GatModel.from_dict(doc["model"])
        net = MutationNet({
            k: np.array(v["data"], dtype=np.float64).reshape(v["shape"])
            for k, v in doc["mutation_net"].items()
        })
        trainer = Trainer(config, model=model, net=net)
        trainer.epoch = int(doc["epoch"])
        trainer.mutation_rounds = int(doc["mutation_rounds"])
        trainer.positions = {
            sid: np.array(v["data"], dtype=np.float64).reshape(v["shape"])
            for sid, v in doc["positions"].items()
        }
        trainer.optimizer.load_state(doc.get("optimizer", {}))
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"invalid checkpoint {path}: {exc}") from None
    return trainer
