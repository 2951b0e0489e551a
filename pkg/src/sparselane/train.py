"""Training loop, checkpoints, and the inference/evaluation runners."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import losses as loss_lib
from . import metrics as metric_lib
from .config import RunConfig, SPEC_VERSION, config_to_dict, diff_config_dicts
from .geometry import EgoMotion
from .network import CurveLaneDetector, rig_tensors
from .synthetic import FrameSample, SceneConfig, generate_sequence, load_dataset
from .temporal import TemporalFusion, TemporalMemory


@dataclass
class FrameRecord:
    image: torch.Tensor  # (C, H, W)
    seg_mask: torch.Tensor  # (H, W)
    rig: object
    targets: dict
    lanes: list
    motion: EgoMotion
    sequence_id: str
    index: int


def build_sequences(cfg: RunConfig) -> list[list[FrameSample]]:
    if cfg.data.dataset_path:
        return load_dataset(cfg.data.dataset_path)
    return [generate_sequence(cfg.data.scene, cfg.data.frames_per_sequence, i)
            for i in range(cfg.data.sequences)]


def to_records(sequences, cfg: RunConfig) -> list[list[FrameRecord]]:
    grid = np.linspace(cfg.model.y_range[0], cfg.model.y_range[1],
                       cfg.model.num_anchor_points)
    out = []
    for frames in sequences:
        recs = []
        for f in frames:
            if f.image is None or f.seg_mask is None:
                raise ValueError(
                    f"sequence {f.sequence_id} frame {f.index} has no raster; "
                    "training needs stored images")
            recs.append(FrameRecord(
                image=torch.from_numpy(np.ascontiguousarray(f.image.transpose(2, 0, 1))),
                seg_mask=torch.from_numpy(f.seg_mask.astype(np.float32)),
                rig=f.rig,
                targets=loss_lib.prepare_targets(f.lanes, grid),
                lanes=f.lanes,
                motion=f.ego_motion_from_prev,
                sequence_id=f.sequence_id,
                index=f.index,
            ))
        out.append(recs)
    return out


def make_model(cfg: RunConfig) -> tuple[CurveLaneDetector, TemporalFusion | None]:
    torch.manual_seed(cfg.seed)
    model = CurveLaneDetector(cfg.model)
    fusion = None
    if cfg.fusion.variant != "none":
        fusion = TemporalFusion(cfg.model, cfg.fusion)
    return model, fusion


def save_checkpoint(path, cfg: RunConfig, model, fusion, optimizer, step: int):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = {
        "model": model.state_dict(),
        "fusion": fusion.state_dict() if fusion is not None else None,
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "torch_rng": torch.get_rng_state(),
        "step": step,
    }
    torch.save(blob, path)
    manifest = {
        "spec_version": SPEC_VERSION,
        "config": config_to_dict(cfg),
        "seed": cfg.seed,
        "step": step,
    }
    with open(Path(str(path) + ".json"), "w") as fh:
        json.dump(manifest, fh, indent=2)


def load_checkpoint(path, cfg: RunConfig, model, fusion=None, optimizer=None):
    path = Path(path)
    manifest_path = Path(str(path) + ".json")
    if manifest_path.exists():
        with open(manifest_path) as fh:
            manifest = json.load(fh)
        saved = manifest.get("config", {}).get("model", {})
        current = config_to_dict(cfg)["model"]
        bad = diff_config_dicts(saved, current)
        if bad:
            raise ValueError(
                "checkpoint model config mismatch at keys: "
                + ", ".join(f"model.{k}" for k in bad))
    blob = torch.load(path, weights_only=False)
    model.load_state_dict(blob["model"])
    if fusion is not None and blob.get("fusion") is not None:
        fusion.load_state_dict(blob["fusion"])
    if optimizer is not None and blob.get("optimizer") is not None:
        optimizer.load_state_dict(blob["optimizer"])
    if blob.get("torch_rng") is not None:
        torch.set_rng_state(blob["torch_rng"])
    return blob.get("step", 0)


class Trainer:
    """Seeded single-process training with deterministic batch order."""

    def __init__(self, cfg: RunConfig, sequences=None, quiet=False):
        self.cfg = cfg
        self.quiet = quiet
        if sequences is None:
            sequences = build_sequences(cfg)
        self.sequences = to_records(sequences, cfg)
        max_lanes = max((len(r.lanes) for seq in self.sequences for r in seq), default=0)
        if cfg.model.num_queries <= max_lanes:
            raise ValueError(
                f"num_queries={cfg.model.num_queries} must exceed the maximum "
                f"ground-truth lane count ({max_lanes})")
        self.model, self.fusion = make_model(cfg)
        params = list(self.model.parameters())
        if self.fusion is not None:
            params += list(self.fusion.parameters())
        self.optimizer = torch.optim.Adam(
            params, lr=cfg.optimizer.learning_rate,
            weight_decay=cfg.optimizer.weight_decay)
        self.temporal = cfg.fusion.variant != "none"
        self.units = self._build_units()
        self.y_range = cfg.model.y_range

    def _build_units(self):
        """Training units: single frames, or fixed-length clips with fusion."""
        units = []
        if not self.temporal:
            for seq in self.sequences:
                units.extend([r] for r in seq)
        else:
            t = self.cfg.train.clip_len
            for seq in self.sequences:
                if len(seq) < t:
                    continue
                for start in range(0, len(seq) - t + 1):
                    units.append(seq[start:start + t])
        if not units:
            raise ValueError("dataset produced no training units")
        return units

    def steps_per_epoch(self) -> int:
        return (len(self.units) + self.cfg.batch_size - 1) // self.cfg.batch_size

    def total_steps(self) -> int:
        total = self.cfg.epochs * self.steps_per_epoch()
        if self.cfg.train.max_steps is not None:
            total = min(total, self.cfg.train.max_steps)
        return total

    def _batch_indices(self, step: int) -> list[int]:
        spe = self.steps_per_epoch()
        epoch, pos = divmod(step - 1, spe)
        order = np.random.default_rng([self.cfg.seed, 11, epoch]).permutation(len(self.units))
        b = self.cfg.batch_size
        return [int(i) for i in order[pos * b:(pos + 1) * b]]


    def _frame_loss(self, records: list[FrameRecord], memories=None):
        images = torch.stack([r.image for r in records])
        rig_t = rig_tensors([r.rig for r in records], dtype=images.dtype)
        state = None
        slots = None
        if memories is not None:
            state = self.model.initial_state(len(records))
            motions = [r.motion for r in records]
            state, slots = self.fusion.apply(memories, state, motions,
                                             self.model.anchor_embed)
        out = self.model(images, rig_t, state=state)
        seg_masks = torch.stack([r.seg_mask for r in records])
        parts = loss_lib.total_loss(out, [r.targets for r in records], seg_masks,
                                    self.cfg.loss, self.y_range)
        if memories is not None:
            conf = torch.sigmoid(out.conf_logits).detach().cpu().numpy()
            anchors = out.anchors.detach().cpu().numpy()
            ranges = torch.stack([out.range_s, out.range_e], dim=-1).detach().cpu().numpy()
            for i, mem in enumerate(memories):
                mem.update(out.content[i].detach(), anchors[i], ranges[i],
                           conf[i], slots[i], records[i].motion)
        return parts

    def train_step(self, step: int) -> dict:
        self.model.train()
        idxs = self._batch_indices(step)
        batch = [self.units[i] for i in idxs]
        self.optimizer.zero_grad()
        if not self.temporal:
            records = [unit[0] for unit in batch]
            parts = self._frame_loss(records)
            loss = parts["total"]
            logged = parts
        else:
            # clips run in lockstep; per-clip memories; stored queries detached
            memories = [TemporalMemory(self.cfg.fusion.history_len) for _ in batch]
            t_len = len(batch[0])
            acc = {"total": 0.0, "curve": 0.0, "query": 0.0, "seg": 0.0}
            for t in range(t_len):
                records = [unit[t] for unit in batch]
                parts = self._frame_loss(records, memories)
                for k in acc:
                    acc[k] = acc[k] + parts[k]
            loss = acc["total"] / t_len
            logged = {k: v / t_len for k, v in acc.items()}
        loss.backward()
        self.optimizer.step()
        return {
            "step": step,
            "total_loss": float(logged["total"]),
            "L_curve": float(logged["curve"]),
            "L_query": float(logged["query"]),
            "L_seg": float(logged["seg"]),
        }

    def run(self, out_dir=None, resume_from=None, step_callback=None) -> list[dict]:
        cfg = self.cfg
        out = Path(out_dir if out_dir is not None else cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        start_step = 0
        if resume_from is not None:
            start_step = load_checkpoint(resume_from, cfg, self.model, self.fusion,
                                         self.optimizer)
        log_path = out / "train_log.jsonl"
        total = self.total_steps()
        records = []
        t0 = time.time()
        with open(log_path, "a") as log:
            for step in range(start_step + 1, total + 1):
                rec = self.train_step(step)
                records.append(rec)
                if step % cfg.train.log_every == 0 or step == total:
                    log.write(json.dumps(rec) + "\n")
                    log.flush()
                    if not self.quiet:
                        rate = step / max(time.time() - t0, 1e-9)
                        print(f"step {step}/{total} total={rec['total_loss']:.4f} "
                              f"curve={rec['L_curve']:.4f} query={rec['L_query']:.4f} "
                              f"seg={rec['L_seg']:.4f} ({rate:.2f} it/s)")
                if step % cfg.train.checkpoint_every == 0 or step == total:
                    save_checkpoint(out / "checkpoint.pt", cfg, self.model,
                                    self.fusion, self.optimizer, step)
                if step_callback is not None and step_callback(self, step, rec):
                    save_checkpoint(out / "checkpoint.pt", cfg, self.model,
                                    self.fusion, self.optimizer, step)
                    break
        return records


@torch.no_grad()
def run_inference(cfg: RunConfig, model: CurveLaneDetector, fusion, sequences):
    """Per-sequence, per-frame lane predictions with the configured fusion."""
    model.eval()
    results = []
    for seq in sequences:
        memory = TemporalMemory(cfg.fusion.history_len) if fusion is not None else None
        frame_preds = []
        for rec in seq:
            images = rec.image.unsqueeze(0)
            rig_t = rig_tensors([rec.rig], dtype=images.dtype)
            state = None
            slots = None
            if memory is not None:
                state = model.initial_state(1)
                state, slots = fusion.apply([memory], state, [rec.motion],
                                            model.anchor_embed)
            out = model(images, rig_t, state=state)
            if memory is not None:
                conf = torch.sigmoid(out.conf_logits).cpu().numpy()
                ranges = torch.stack([out.range_s, out.range_e], dim=-1).cpu().numpy()
                memory.update(out.content[0], out.anchors.cpu().numpy()[0],
                              ranges[0], conf[0], slots[0], rec.motion)
            frame_preds.append(model.to_lane_predictions(out)[0])
        results.append(frame_preds)
    return results


def evaluate_dataset(cfg: RunConfig, model, fusion, sequences) -> dict:
    """Full metric report: F-score suite, top-view protocol, stability."""
    preds = run_inference(cfg, model, fusion, sequences)
    all_preds, all_gts = [], []
    for seq_preds, seq in zip(preds, sequences):
        for frame_preds, rec in zip(seq_preds, seq):
            all_preds.append(frame_preds)
            all_gts.append(rec.lanes)
    report = {
        "config": config_to_dict(cfg),
        "openlane": metric_lib.openlane_evaluate(all_preds, all_gts, cfg.eval),
        "once": metric_lib.once_evaluate(all_preds, all_gts, cfg.eval),
    }
    stab = []
    for seq_preds, seq in zip(preds, sequences):
        if len(seq) < 2:
            continue
        rep = metric_lib.stability_evaluate(seq_preds, [r.lanes for r in seq], cfg.eval)
        stab.append({
            "sequence_id": seq[0].sequence_id,
            "f_stab": rep.f_stab,
            "dist_series": rep.dist_series,
            "skipped_frames": rep.skipped_frames,
        })
    report["stability"] = {
        "mean_f_stab": float(np.mean([s["f_stab"] for s in stab])) if stab else None,
        "per_sequence": stab,
    }
    return report
