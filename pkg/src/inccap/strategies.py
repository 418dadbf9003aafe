"""Training strategies for adding classes to a trained captioner.

``F``    fine-tuning: everything trainable, initialised from the previous model.
``E_F``  encoder frozen, decoder trainable.
``D_F``  decoder frozen except the rows/columns added for new vocabulary; encoder trainable.
``P``    fine-tuning plus a cross-entropy term against captions the previous
         model produces for the new images (pseudo labels), weighted by ``beta``.
``FD``   a freshly initialised student trained with cross-entropy plus
         ``lam * ||teacher_feature - student_feature||^2``, the teacher being
         the previous model's frozen encoder.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from .errors import ConfigurationError, ContractViolation
from .model import (STAT_PARAMS, ModelState, caption_images, decode_logits_t, encode_t,
                    init_params, is_decoder, is_encoder)
from .vocab import END_ID, PAD_ID, START_ID, Vocabulary, tokenize

log = logging.getLogger(__name__)

VARIANTS = ("F", "E_F", "D_F", "P", "FD")
EPS = 1e-12


@dataclass(frozen=True)
class StrategyConfig:
    variant: str = "F"
    beta: float = 1.0
    lam: float = 1.0
    epochs: int = 20
    learning_rate: float = 1e-3
    batch_size: int = 8
    seed: int = 0
    patience: int = 5
    early_stop: bool = True
    # FD only: also re-initialise the decoder (False keeps the previous decoder)
    fd_reinit_decoder: bool = True
    max_len: int = 20

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown strategy {self.variant!r}; expected one of {VARIANTS}")
        if self.beta < 0 or self.lam < 0:
            raise ConfigurationError("beta and lam must be non-negative")
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ConfigurationError("epochs >= 0, batch_size >= 1 and learning_rate > 0 required")


# --------------------------------------------------------------------------- losses


def loss_ce(pred_dists, target) -> torch.Tensor:
    """Summed negative log-likelihood of ``target`` over non-pad steps, averaged over the batch.

    ``pred_dists`` is (B, T, V) probabilities (or (T, V) for a single sequence);
    ``target`` holds the T tokens each step should predict, padded with ``<pad>``.
    """
    probs = torch.as_tensor(pred_dists)
    target = torch.as_tensor(target, dtype=torch.long)
    if probs.dim() == 2:
        probs, target = probs[None], target[None]
    if probs.shape[:2] != target.shape:
        raise ContractViolation(f"distributions {tuple(probs.shape)} do not match targets {tuple(target.shape)}")
    picked = probs.gather(2, target.clamp(max=probs.shape[2] - 1).unsqueeze(2)).squeeze(2)
    nll = -torch.log(picked.clamp_min(EPS))
    nll = torch.where(target == PAD_ID, torch.zeros_like(nll), nll)
    return nll.sum() / probs.shape[0]


def loss_pseudo(pred_dists, pseudo_target, beta: float = 1.0) -> torch.Tensor:
    """``beta`` times the cross-entropy against the previous model's captions."""
    pseudo_target = torch.as_tensor(pseudo_target, dtype=torch.long)
    if pseudo_target.numel() == 0:
        raise ContractViolation("pseudo target is empty")
    return beta * loss_ce(pred_dists, pseudo_target)


def loss_distill(teacher_feat, student_feat, lam: float = 1.0) -> torch.Tensor:
    """``lam`` times the squared L2 distance between features, averaged over the batch."""
    teacher = torch.as_tensor(teacher_feat)
    student = torch.as_tensor(student_feat)
    if teacher.shape != student.shape:
        raise ContractViolation(f"feature shapes differ: {tuple(teacher.shape)} vs {tuple(student.shape)}")
    if student.dim() == 1:
        teacher, student = teacher[None], student[None]
    diff = teacher.detach() - student
    return lam * (diff * diff).sum(dim=1).mean()


# --------------------------------------------------------------------------- batches


def pad_sequences(seqs: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    out = np.full((len(seqs), int(lengths.max()) if len(seqs) else 0), PAD_ID, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out, lengths


@dataclass
class CaptionBatch:
    images: np.ndarray
    targets: np.ndarray
    lengths: np.ndarray
    pseudo_targets: np.ndarray | None = None
    pseudo_lengths: np.ndarray | None = None

    def __post_init__(self):
        if len(self.images) != len(self.targets):
            raise ContractViolation("images and targets differ in batch size")
        if self.pseudo_targets is not None and len(self.pseudo_targets) != len(self.targets):
            raise ContractViolation("pseudo targets differ in batch size")


def caption_samples(ids: Sequence[int], store, vocab: Vocabulary) -> list[tuple[int, list[int]]]:
    """(image_id, encoded caption) for every reference caption of every image."""
    return [(i, vocab.encode(tokenize(c), wrap=True)) for i in ids for c in store.captions(i)]


# --------------------------------------------------------------------------- pseudo labels


def generate_pseudo_labels(old_state: ModelState, images, image_ids: Sequence[int] | None = None,
                           cache_path=None, max_len: int = 20) -> dict[int, list[int]]:
    """Greedy captions of ``old_state`` on new-task images, wrapped in start/end tokens.

    With ``cache_path`` the labels are stored as JSON next to the old model's
    checksum; a later call with the same model and ids reads the file instead of
    decoding again.
    """
    images = np.asarray(images)
    ids = [int(i) for i in (image_ids if image_ids is not None else range(len(images)))]
    if len(ids) != len(images):
        raise ContractViolation("image_ids and images differ in length")
    checksum = old_state.checksum()
    if cache_path is not None:
        cache_path = Path(cache_path)
        if cache_path.exists():
            cached = json.loads(cache_path.read_text(encoding="utf-8"))
            labels = {int(k): v for k, v in cached.get("labels", {}).items()}
            if cached.get("model_checksum") == checksum and set(labels) == set(ids):
                return labels
    seqs = caption_images(old_state, images, max_len) if len(ids) else []
    labels = {i: [START_ID, *s, END_ID] for i, s in zip(ids, seqs)}
    if cache_path is not None:
        cache_path.parent.mkdir(parents=True, exist_ok=True)
        body = {"model_checksum": checksum, "labels": {str(k): v for k, v in sorted(labels.items())}}
        cache_path.write_text(json.dumps(body, sort_keys=True) + "\n", encoding="utf-8")
    return labels


# --------------------------------------------------------------------------- training


def trainability_mask(state: ModelState, variant: str) -> dict[str, np.ndarray]:
    mask = {}
    for name, arr in state.params.items():
        if variant == "E_F" and is_encoder(name):
            m = np.zeros(arr.shape, bool)
        elif variant == "D_F" and is_decoder(name):
            m = np.zeros(arr.shape, bool)
            k = state.prior_vocab_size
            if name == "dec.embed":
                m[k:] = True
            elif name == "dec.out.w":
                m[:, k:] = True
            elif name == "dec.out.b":
                m[k:] = True
        else:
            m = np.ones(arr.shape, bool)
        mask[name] = m
    return mask


def _derived_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def rebuild_student(state: ModelState, cfg: StrategyConfig, task_id: int) -> ModelState:
    """Fresh parameters for feature distillation, keeping vocabulary size and version."""
    fresh = init_params(state.config, state.vocab_size, _derived_seed(cfg.seed, task_id, 17))
    if not cfg.fd_reinit_decoder:
        fresh.update({k: v.copy() for k, v in state.params.items() if is_decoder(k)})
    return ModelState(state.config, fresh, state.vocab_version, prior_vocab_size=state.prior_vocab_size)


def _val_cider(state, task, vocab, store, max_len):
    from .metrics import caption_split, cider, EvalPair, reference_tokens

    caps = caption_split(state, task.val, vocab, store, max_len)
    refs = reference_tokens(store, task.val)
    return cider([EvalPair(caps[i], refs[i]) for i in task.val])


def train_task(state: ModelState, task, cfg: StrategyConfig, store, vocab: Vocabulary,
               teacher: ModelState | None = None,
               pseudo_labels: Mapping[int, Sequence[int]] | None = None,
               history: list | None = None) -> ModelState:
    """Train on ``task.train`` under ``cfg.variant`` and return the new state.

    ``state`` must already carry the expanded decoder for ``vocab``.  Frozen
    entries come back bit-identical.  With ``cfg.early_stop`` the parameters of
    the epoch with the best validation CIDEr are returned.  Per-epoch mean batch
    losses are appended to ``history`` when given.
    """
    if state.vocab_size != len(vocab) or state.vocab_version != vocab.version:
        raise ContractViolation("model and vocabulary are out of sync; expand the decoder first")
    if cfg.variant == "FD" and teacher is None:
        raise ConfigurationError("feature distillation needs a teacher model")
    if cfg.variant == "P":
        if pseudo_labels is None:
            raise ConfigurationError("pseudo-labeling needs cached pseudo labels")
        missing = [i for i in task.train if i not in pseudo_labels]
        if missing:
            raise ConfigurationError(f"no pseudo labels for images {missing[:5]}")

    if cfg.variant == "FD":
        state = rebuild_student(state, cfg, task.task_id)
    state = replace(state.copy(), trainable=trainability_mask(state, cfg.variant))
    if cfg.epochs == 0 or not task.train:
        return state

    p = state.tensors(requires_grad=True)
    masks = {k: torch.from_numpy(m) for k, m in state.trainable.items()}
    partial = {k for k, m in state.trainable.items() if m.any() and not m.all()}
    frozen_vals = {k: p[k].detach().clone() for k in partial}
    opt = torch.optim.Adam([p[k] for k in sorted(p) if p[k].requires_grad], lr=cfg.learning_rate)

    teacher_p = teacher.tensors() if teacher is not None and cfg.variant == "FD" else None
    ids = list(task.train)
    pos = {i: n for n, i in enumerate(ids)}
    images = torch.from_numpy(np.ascontiguousarray(store.images(ids), dtype=state.dtype))
    samples = caption_samples(ids, store, vocab)
    rng = np.random.default_rng([cfg.seed, task.task_id])
    use_pseudo = cfg.variant == "P" and cfg.beta != 0
    # a frozen encoder is a fixed function: running statistics, no updates
    train_encoder = any(m.any() for k, m in state.trainable.items() if is_encoder(k) and k not in STAT_PARAMS)

    best_score, best_params, stale = -np.inf, None, 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(samples))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            chosen = [samples[k] for k in order[start:start + cfg.batch_size]]
            rows = torch.tensor([pos[i] for i, _ in chosen])
            tgt = torch.from_numpy(pad_sequences([s for _, s in chosen])[0])
            feats = encode_t(p, images[rows], state.config, batch_stats=train_encoder,
                             update_stats=train_encoder)
            probs = torch.softmax(decode_logits_t(p, feats, tgt[:, :-1]), dim=-1)
            loss = loss_ce(probs, tgt[:, 1:])
            if use_pseudo:
                ps = torch.from_numpy(pad_sequences([pseudo_labels[i] for i, _ in chosen])[0])
                pprobs = torch.softmax(decode_logits_t(p, feats, ps[:, :-1]), dim=-1)
                loss = loss + loss_pseudo(pprobs, ps[:, 1:], cfg.beta)
            if teacher_p is not None:
                with torch.no_grad():
                    tfeats = encode_t(teacher_p, images[rows], teacher.config, batch_stats=True)
                loss = loss + loss_distill(tfeats, feats, cfg.lam)
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite loss in epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            for k in partial:
                p[k].grad.mul_(masks[k])
            opt.step()
            with torch.no_grad():
                for k in partial:
                    p[k].copy_(torch.where(masks[k], p[k], frozen_vals[k]))
            losses.append(float(loss.detach()))
        if history is not None:
            history.append(float(np.mean(losses)))

        if cfg.early_stop and task.val:
            current = replace(state, params={k: v.detach().numpy().copy() for k, v in p.items()})
            score = _val_cider(current, task, vocab, store, cfg.max_len)
            log.debug("task %s %s epoch %d loss %.4f val CIDEr %.2f", task.task_id, cfg.variant,
                      epoch, history[-1] if history else float(np.mean(losses)), score)
            if score > best_score:
                best_score, best_params, stale = score, current.params, 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    break

    if best_params is None:
        best_params = {k: v.detach().numpy().copy() for k, v in p.items()}
    return replace(state, params=best_params)
