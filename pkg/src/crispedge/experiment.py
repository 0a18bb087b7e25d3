"""Training loop and the weighted-CE vs fusion crispness comparison."""

from __future__ import annotations

import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig
from .data import Sample, load_dataset, save_image, synth_scenes
from .evaluate import CrispnessReport, crispness_report
from .loss import make_loss
from .model import Adam, Network, build, multiscale_predict, predict, train_step

log = logging.getLogger(__name__)


@dataclass
class Split:
    train: list  # Sample, one per (image, annotation)
    test: list  # Sample with the reference annotation


def synth_split(cfg: RunConfig) -> Split:
    scenes = synth_scenes(cfg.synth_spec(), cfg.synth_n)
    train = [
        Sample(sc.image, ann, f"{sc.id}_a{k}")
        for sc in scenes[: cfg.synth_train]
        for k, ann in enumerate(sc.annotations)
    ]
    test = [Sample(sc.image, sc.annotations[0], sc.id) for sc in scenes[cfg.synth_train:]]
    return Split(train, test)


def load_split(cfg: RunConfig) -> Split:
    """Manifests when configured, otherwise the synthetic split."""
    if cfg.train_manifest or cfg.test_manifest:
        train = load_dataset(cfg.train_manifest) if cfg.train_manifest else []
        test = load_dataset(cfg.test_manifest) if cfg.test_manifest else []
        return Split(train, test)
    return synth_split(cfg)


def write_synth_split(cfg: RunConfig, out_dir) -> dict:
    """Write a synthetic split as netpbm files plus ``train.tsv``/``test.tsv`` manifests.

    Images are stored once; ``train.tsv`` lists one line per annotation.
    """
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "gt").mkdir(parents=True, exist_ok=True)
    scenes = synth_scenes(cfg.synth_spec(), cfg.synth_n)
    rows = {"train.tsv": [], "test.tsv": []}
    for i, sc in enumerate(scenes):
        img_rel = os.path.join("images", sc.id + ".pgm")
        save_image(out / img_rel, sc.image)
        is_train = i < cfg.synth_train
        anns = sc.annotations if is_train else sc.annotations[:1]
        for k, ann in enumerate(anns):
            ann_rel = os.path.join("gt", f"{sc.id}_a{k}.pgm")
            save_image(out / ann_rel, ann.astype(np.float64))
            rows["train.tsv" if is_train else "test.tsv"].append(f"{img_rel}\t{ann_rel}")
    paths = {}
    for name, lines in rows.items():
        paths[name] = out / name
        paths[name].write_text("".join(line + "\n" for line in lines))
    return paths


@dataclass
class TrainResult:
    net: Network
    epoch_loss: list = field(default_factory=list)
    seconds: float = 0.0


def train(cfg: RunConfig, samples, loss: str | None = None) -> TrainResult:
    """Train a fresh network on ``samples``; shuffling is seeded by ``cfg.seed``."""
    if not samples:
        raise ValueError("no training samples")
    img = samples[0].image
    h, w = img.shape[:2]
    net = build(cfg.network(1 if img.ndim == 2 else 3, h, w))
    loss_fn = make_loss(loss or cfg.loss, cfg.fusion())
    opt = Adam(lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng([cfg.seed, 1])
    result = TrainResult(net)
    start = time.perf_counter()
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(samples))
        total = 0.0
        for b in range(0, len(samples), cfg.batch_size):
            batch = [(samples[i].image, samples[i].annotation) for i in order[b:b + cfg.batch_size]]
            total += train_step(net, batch, loss_fn=loss_fn, optimizer=opt)
        result.epoch_loss.append(total / len(samples))
        log.info("epoch %d loss %.6f", epoch + 1, result.epoch_loss[-1])
    result.seconds = time.perf_counter() - start
    return result


def predict_all(net, samples, multiscale=False):
    fn = multiscale_predict if multiscale else predict
    return [fn(net, s.image) for s in samples]


@dataclass
class ABResult:
    rows: dict  # loss name -> CrispnessReport

    def to_table(self):
        lines = [f"{'loss':<12} {'ODS(pre-NMS)':>12} {'ODS(post-NMS)':>13} {'thickness':>9}"]
        for name, r in self.rows.items():
            lines.append(f"{name:<12} {r.pre_nms_ods:>12.4f} {r.post_nms_ods:>13.4f} {r.thickness_ratio:>9.3f}")
        return "\n".join(lines)

    def fusion_wins(self, min_thinning=0.0):
        """Fusion row has strictly higher pre-NMS ODS and a thickness ratio
        at least ``min_thinning`` (fraction) below the weighted-CE row."""
        f, w = self.rows["fusion"], self.rows["weighted-ce"]
        return f.pre_nms_ods > w.pre_nms_ods and f.thickness_ratio < (1.0 - min_thinning) * w.thickness_ratio


def run_ab(cfg: RunConfig, threads=1, losses=("weighted-ce", "fusion")) -> ABResult:
    """Train one network per loss from identical seeds and data, then compare crispness."""
    split = load_split(cfg)
    rows = {}
    for name in losses:
        res = train(cfg, split.train, name)
        preds = predict_all(res.net, split.test, cfg.multiscale)
        rows[name] = crispness_report(preds, [s.annotation for s in split.test], cfg.eval_config(), threads)
        log.info("%s trained in %.1fs", name, res.seconds)
    return ABResult(rows)
