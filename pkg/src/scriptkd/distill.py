"""Embedding fusion, the combined distillation objective, and training loops.

The training protocol has two phases.  First the teacher (vision encoder +
projector + large decoder) is pretrained end to end on the synthetic task,
then frozen and briefly fine-tuned through LoRA adapters.  Second, a student
decoder is trained under the combined objective

    total = w_ce * cross_entropy + w_l2 * hidden_distance + w_kl * logit_kl

where the teacher side of the distance/KL terms is detached.  Teacher and
student each own a projector sized to their hidden width; they share one
(frozen) vision encoder during distillation.
"""

from __future__ import annotations

import math
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from . import ndgrad as ng
from .encoder import EmbeddingSeq, Projector, VisionConfig, VisionEncoder
from .errors import ContractError, DimensionError, ParameterError
from .layers import Linear, ParamSet
from .ndgrad import GradTensor, backward
from .student import DecoderLM, StudentConfig
from .teacher import adapter_tensors, attach_lora, teacher_config
from .tokenizer import BpeVocab

IGNORE_ID = -100


def rng_for(seed: int, *key) -> np.random.Generator:
    """Deterministic child generator for a (seed, key...) path."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, key)]))


# ---------------------------------------------------------------------------
# fusion and the combined loss
# ---------------------------------------------------------------------------


def fuse(image: EmbeddingSeq, text: EmbeddingSeq, text_ids, eos_id: int,
         ignore_id: int = IGNORE_ID):
    """Concatenate image embeddings (first) with BOS+text embeddings and
    build next-token targets.

    ``text`` must hold the BOS embedding followed by one embedding per id in
    ``text_ids``.  Image positions get ``ignore_id`` targets; text positions
    are supervised one step ahead, ending with EOS.
    Returns (combined EmbeddingSeq, targets int array).
    """
    if image.width != text.width:
        raise DimensionError(f"width mismatch: image {image.width} vs text {text.width}")
    text_ids = list(text_ids)
    if text.length != len(text_ids) + 1:
        raise ContractError(
            f"text embeddings must be BOS + tokens: got length {text.length} "
            f"for {len(text_ids)} ids")
    combined = ng.concat_seq(image.tensor, text.tensor, axis=0)
    p = image.length
    targets = np.full(p + text.length, ignore_id, dtype=np.int64)
    targets[p:p + len(text_ids)] = text_ids
    targets[p + len(text_ids)] = eos_id
    return EmbeddingSeq(combined, role="combined"), targets


@dataclass
class LossBundle:
    """The objective's scalars plus the weights that combined them."""

    l_ce: float
    l_l2: float
    l_kl: float
    l_total: float
    w_ce: float = 1.0
    w_l2: float = 1.0
    w_kl: float = 1.0
    total: GradTensor | None = field(default=None, repr=False, compare=False)


def kd_loss(e1, e2, t_logits, s_logits, targets, weights=(1.0, 1.0, 1.0),
            proj: Linear | None = None, ignore_id: int = IGNORE_ID,
            temperature: float = 1.0) -> LossBundle:
    """Combined distillation objective over one sequence.

    ``e1``/``t_logits`` (teacher side) are detached: no gradient flows into
    them.  ``proj`` bridges the student width to the teacher width for the
    hidden-state distance when the two differ.  Zero-weighted terms may pass
    their teacher inputs as None and contribute exactly nothing.
    """
    w_ce, w_l2, w_kl = (float(w) for w in weights)
    if min(w_ce, w_l2, w_kl) < 0:
        raise ParameterError(f"loss weights must be nonnegative, got {weights}")
    l_ce_t = ng.cross_entropy(s_logits, targets, ignore_id=ignore_id)
    total = ng.scale(l_ce_t, w_ce)

    l_l2 = 0.0
    if w_l2 > 0 or e1 is not None:
        if e1 is None:
            raise ContractError("w_l2 > 0 requires teacher hidden states")
        e2p = proj(e2) if proj is not None else e2
        e1d = e1.detach() if isinstance(e1, GradTensor) else GradTensor(e1)
        if e1d.shape[0] != e2p.shape[0]:
            raise DimensionError(
                f"sequence lengths disagree: teacher {e1d.shape[0]} vs student {e2p.shape[0]}")
        l_l2_t = ng.l2_distance(e1d, e2p)
        l_l2 = l_l2_t.item()
        if w_l2 > 0:
            total = ng.add(total, ng.scale(l_l2_t, w_l2))

    l_kl = 0.0
    if w_kl > 0 or t_logits is not None:
        if t_logits is None:
            raise ContractError("w_kl > 0 requires teacher logits")
        tl = t_logits.detach() if isinstance(t_logits, GradTensor) else GradTensor(t_logits)
        if tl.shape != s_logits.shape:
            raise DimensionError(
                f"logit shapes disagree: teacher {tl.shape} vs student {s_logits.shape}")
        if temperature != 1.0:
            l_kl_t = ng.kl_divergence(ng.scale(tl, 1.0 / temperature),
                                      ng.scale(s_logits, 1.0 / temperature))
        else:
            l_kl_t = ng.kl_divergence(tl, s_logits)
        l_kl = l_kl_t.item()
        if w_kl > 0:
            total = ng.add(total, ng.scale(l_kl_t, w_kl))

    l_ce = l_ce_t.item()
    return LossBundle(l_ce=l_ce, l_l2=l_l2, l_kl=l_kl, l_total=total.item(),
                      w_ce=w_ce, w_l2=w_l2, w_kl=w_kl, total=total)


# ---------------------------------------------------------------------------
# optimization
# ---------------------------------------------------------------------------


def cosine_lr(step: int, total: int, lr_max: float, warmup_frac: float = 0.05) -> float:
    """Linear warmup to ``lr_max`` then cosine decay to zero."""
    if total <= 0:
        raise ParameterError(f"total steps must be positive, got {total}")
    if not 0 <= step <= total:
        raise ParameterError(f"step {step} outside [0, {total}]")
    warmup = warmup_frac * total
    if warmup > 0 and step < warmup:
        return lr_max * step / warmup
    span = max(total - warmup, 1e-12)
    progress = (step - warmup) / span
    return lr_max * 0.5 * (1.0 + math.cos(math.pi * progress))


def adam_state(tensors) -> dict:
    return {"step": 0,
            "m": [np.zeros_like(t.data) for t in tensors],
            "v": [np.zeros_like(t.data) for t in tensors]}


def adamw_step(tensors, state, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
    """One AdamW update in place: bias-corrected moments, decoupled decay.

    Tensors with no gradient are skipped entirely.  Returns the state.
    """
    b1, b2 = betas
    state["step"] += 1
    t = state["step"]
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for i, p in enumerate(tensors):
        g = p.grad
        if g is None:
            continue
        m = state["m"][i]
        v = state["v"][i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        if weight_decay:
            update = update + weight_decay * p.data
        p.data = p.data - lr * update.astype(p.dtype)
    return state


class AdamW:
    """Stateful wrapper over ``adamw_step`` for a fixed tensor list."""

    def __init__(self, tensors, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.tensors = list(tensors)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.state = adam_state(self.tensors)

    def step(self, lr: float | None = None):
        adamw_step(self.tensors, self.state, self.lr if lr is None else lr,
                   self.betas, self.eps, self.weight_decay)

    def zero_grad(self):
        for t in self.tensors:
            t.zero_grad()


# ---------------------------------------------------------------------------
# training plan and pipeline
# ---------------------------------------------------------------------------


@dataclass
class TrainPlan:
    """Optimization recipe.  Defaults mirror the published setup (teacher LR
    1e-6, student LR 1e-4, batch 4 with 8 accumulation steps, cosine
    schedule); desk-scale runs usually raise the learning rates."""

    lr_teacher: float = 1e-6
    lr_student: float = 1e-4
    batch_size: int = 4
    grad_accum: int = 8
    warmup_frac: float = 0.05
    seed: int = 0
    epochs: int = 3
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    # desk-scale teacher pretraining (stand-in for LLM pretraining)
    pretrain_lr: float = 1e-3
    pretrain_epochs: int = 6
    accuracy_target: float | None = None  # early-stop threshold on val token accuracy
    lora_rank: int = 64
    lora_alpha: float | None = None
    lora_steps: int = 25
    kl_temperature: float = 1.0
    cache_teacher: bool = True
    val_subset: int = 48
    max_gen_len: int = 32

    @property
    def effective_batch(self) -> int:
        return self.batch_size * self.grad_accum


class Pipeline:
    """Vision encoder + projector + decoder LM for one model (teacher or
    student).  ``shared_encoder`` lets the student reuse the teacher's
    (frozen) encoder."""

    def __init__(self, lm_config: StudentConfig, vision_config: VisionConfig,
                 seed: int = 0, shared_encoder: VisionEncoder | None = None):
        self.lm_config = lm_config
        self.vision_config = vision_config
        if shared_encoder is not None:
            if shared_encoder.config.d_v != vision_config.d_v:
                raise DimensionError("shared encoder width differs from vision config")
            self.encoder = shared_encoder
            self.owns_encoder = False
        else:
            self.encoder = VisionEncoder(vision_config, rng_for(seed, 1))
            self.owns_encoder = True
        self.projector = Projector(vision_config.d_v, lm_config.hidden, rng_for(seed, 2))
        self.lm = DecoderLM(lm_config, rng_for(seed, 3))

    def image_embeds(self, image) -> EmbeddingSeq:
        return self.projector.project(self.encoder.encode_image(image))

    def forward_sample(self, image, ids, vocab: BpeVocab):
        """(hidden states, logits, targets) for one (image, token ids) pair."""
        z_img = self.image_embeds(image)
        text = self.lm.embed_tokens([vocab.bos_id] + list(ids))
        zc, targets = fuse(z_img, text, ids, vocab.eos_id)
        hidden, logits = self.lm.forward(zc)
        return hidden, logits, targets

    def generate_ids(self, image, vocab: BpeVocab, max_len: int = 32):
        return self.lm.generate(self.image_embeds(image), vocab.bos_id,
                                vocab.eos_id, vocab.pad_id, max_len=max_len)

    # -- parameter plumbing --

    def param_sets(self) -> dict[str, ParamSet]:
        sets = {"projector": self.projector.params, "lm": self.lm.params}
        if self.owns_encoder:
            sets["encoder"] = self.encoder.params
        return sets

    def all_tensors(self, trainable_only=False):
        out = []
        for ps in self.param_sets().values():
            out.extend(ps.tensors(trainable_only=trainable_only))
        return out

    def zero_grad(self):
        for ps in self.param_sets().values():
            ps.zero_grad()

    def freeze(self):
        for t in self.all_tensors():
            t.requires_grad = False
        for t in self.encoder.params.tensors():
            t.requires_grad = False

    def state_dict(self):
        state = {}
        for section, ps in self.param_sets().items():
            for name, arr in ps.state_dict().items():
                state[f"{section}/{name}"] = arr
        if not self.owns_encoder:
            for name, arr in self.encoder.params.state_dict().items():
                state[f"encoder/{name}"] = arr
        return state

    def load_state_dict(self, state):
        sections = dict(self.param_sets())
        sections.setdefault("encoder", self.encoder.params)
        for section, ps in sections.items():
            sub = {name[len(section) + 1:]: arr for name, arr in state.items()
                   if name.startswith(section + "/")}
            ps.load_state_dict(sub)


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

_MAGIC = b"MOSC1"
_VERSION = 1
_DTYPE_F32 = 0


def save_checkpoint(path, state: dict[str, np.ndarray]):
    """Binary container: magic, version byte, entry table, little-endian
    float32 payloads."""
    import struct

    names = sorted(state)
    payloads = [np.asarray(state[n], dtype="<f4") for n in names]
    offsets = []
    off = 0
    for arr in payloads:
        offsets.append(off)
        off += arr.nbytes
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(bytes([_VERSION]))
        f.write(struct.pack("<I", len(names)))
        for name, arr, offset in zip(names, payloads, offsets):
            enc = name.encode("utf-8")
            f.write(struct.pack("<H", len(enc)))
            f.write(enc)
            f.write(bytes([_DTYPE_F32, arr.ndim]))
            for d in arr.shape:
                f.write(struct.pack("<I", d))
            f.write(struct.pack("<Q", offset))
        for arr in payloads:
            f.write(arr.tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    import struct

    from .errors import DataFormatError

    with open(path, "rb") as f:
        raw = f.read()
    if raw[:5] != _MAGIC:
        raise DataFormatError(f"{path}: bad magic, not a checkpoint")
    if raw[5] != _VERSION:
        raise DataFormatError(f"{path}: unsupported version {raw[5]}")
    (count,) = struct.unpack_from("<I", raw, 6)
    pos = 10
    entries = []
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos:pos + name_len].decode("utf-8")
        pos += name_len
        dtype_tag, ndim = raw[pos], raw[pos + 1]
        pos += 2
        if dtype_tag != _DTYPE_F32:
            raise DataFormatError(f"{path}: unknown dtype tag {dtype_tag}")
        shape = struct.unpack_from(f"<{ndim}I", raw, pos) if ndim else ()
        pos += 4 * ndim
        (offset,) = struct.unpack_from("<Q", raw, pos)
        pos += 8
        entries.append((name, shape, offset))
    payload = raw[pos:]
    state = {}
    for name, shape, offset in entries:
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(payload, dtype="<f4", count=n, offset=offset)
        state[name] = arr.reshape(shape).copy()
    return state


class MetricsLog:
    """Tab-separated metric lines: step, split, metric, value."""

    def __init__(self, path=None):
        self.path = path
        self.rows = []
        self._fh = open(path, "w", encoding="utf-8") if path else None

    def log(self, step: int, split: str, metric: str, value: float):
        self.rows.append((step, split, metric, float(value)))
        if self._fh:
            self._fh.write(f"{step}\t{split}\t{metric}\t{value}\n")
            self._fh.flush()

    def close(self):
        if self._fh:
            self._fh.close()
            self._fh = None


def _progress(msg, enabled=True):
    if enabled:
        print(msg, file=sys.stderr, flush=True)


# ---------------------------------------------------------------------------
# shared loop helpers
# ---------------------------------------------------------------------------


def _micro_batches(order, batch_size):
    for i in range(0, len(order), batch_size):
        yield order[i:i + batch_size]


def _mean_loss(losses):
    total = losses[0]
    for extra in losses[1:]:
        total = ng.add(total, extra)
    return ng.scale(total, 1.0 / len(losses))


def token_accuracy(pipeline: Pipeline, samples, vocab: BpeVocab) -> float:
    """Teacher-forced next-token accuracy over supervised positions."""
    hit = total = 0
    for s in samples:
        _, logits, targets = pipeline.forward_sample(s.image, s.ids, vocab)
        keep = targets != IGNORE_ID
        pred = logits.data.argmax(axis=-1)
        hit += int((pred[keep] == targets[keep]).sum())
        total += int(keep.sum())
    return hit / max(total, 1)


def corpus_bleu_on(pipeline: Pipeline, samples, vocab: BpeVocab,
                   max_len: int = 32) -> float:
    """Corpus BLEU of greedy generations against reference texts."""
    from .evalkit import corpus_bleu
    from .tokenizer import decode_lossy

    pairs = []
    for s in samples:
        pred = decode_lossy(vocab, pipeline.generate_ids(s.image, vocab, max_len=max_len))
        pairs.append((pred.split(), [s.text.split()]))
    return corpus_bleu(pairs).bleu


# ---------------------------------------------------------------------------
# teacher training (pretrain, then LoRA fine-tune)
# ---------------------------------------------------------------------------


def teacher_finetune_step(pipeline: Pipeline, batch, opt: AdamW, vocab: BpeVocab,
                          lr: float) -> LossBundle:
    """One adapter fine-tuning step: CE on text positions, backprop into the
    trainable tensors (adapters + projector), optimizer update."""
    if not batch:
        raise ContractError("empty batch")
    losses = []
    for s in batch:
        _, logits, targets = pipeline.forward_sample(s.image, s.ids, vocab)
        losses.append(ng.cross_entropy(logits, targets, ignore_id=IGNORE_ID))
    loss = _mean_loss(losses)
    backward(loss)
    opt.step(lr=lr)
    opt.zero_grad()
    ce = loss.item()
    return LossBundle(l_ce=ce, l_l2=0.0, l_kl=0.0, l_total=ce,
                      w_ce=1.0, w_l2=0.0, w_kl=0.0)


def train_teacher(plan: TrainPlan, splits, vocab: BpeVocab,
                  vision_config: VisionConfig | None = None,
                  lm_config: StudentConfig | None = None,
                  log: MetricsLog | None = None, verbose: bool = False) -> Pipeline:
    """Pretrain the teacher end to end, then freeze it and fine-tune LoRA
    adapters (plus the projector) for a short phase.

    ``splits`` maps split name -> list of samples with ``.image`` and
    ``.ids`` attributes.  Returns the frozen, adapter-carrying pipeline.
    """
    train = splits["train"]
    if not train:
        raise ContractError("teacher training requires a non-empty train split")
    val = splits.get("val") or []
    log = log or MetricsLog()
    lm_cfg = lm_config or teacher_config(vocab=vocab.size)
    vis_cfg = vision_config or VisionConfig()
    pipeline = Pipeline(lm_cfg, vis_cfg, seed=plan.seed)

    # phase A: full-weight pretraining on the synthetic task
    tensors = pipeline.all_tensors()
    opt = AdamW(tensors, plan.pretrain_lr, plan.betas, plan.adam_eps, plan.weight_decay)
    steps_per_epoch = math.ceil(len(train) / plan.effective_batch)
    total_steps = max(1, steps_per_epoch * plan.pretrain_epochs)
    step = 0
    t0 = time.time()
    for epoch in range(plan.pretrain_epochs):
        order = rng_for(plan.seed, 10, epoch).permutation(len(train))
        for group_start in range(0, len(order), plan.effective_batch):
            group = order[group_start:group_start + plan.effective_batch]
            micro = list(_micro_batches(group, plan.batch_size))
            for mb in micro:
                losses = []
                for idx in mb:
                    s = train[idx]
                    _, logits, targets = pipeline.forward_sample(s.image, s.ids, vocab)
                    losses.append(ng.cross_entropy(logits, targets, ignore_id=IGNORE_ID))
                backward(ng.scale(_mean_loss(losses), 1.0 / len(micro)))
            lr = cosine_lr(min(step, total_steps), total_steps, plan.pretrain_lr,
                           plan.warmup_frac)
            opt.step(lr=lr)
            opt.zero_grad()
            step += 1
        if val:
            subset = val[:max(plan.val_subset, 1)]
            acc = token_accuracy(pipeline, subset, vocab)
            log.log(step, "val", "token_accuracy", acc)
            _progress(f"[teacher] epoch {epoch + 1}/{plan.pretrain_epochs} "
                      f"val token accuracy {acc:.4f} ({time.time() - t0:.0f}s)", verbose)
            if plan.accuracy_target is not None and acc >= plan.accuracy_target:
                break

    # phase B: freeze everything, attach adapters, short LoRA fine-tune
    pipeline.encoder.params.freeze()
    for t in pipeline.projector.params.tensors():
        t.requires_grad = True  # projector keeps training alongside adapters
    attach_lora(pipeline.lm, rank=min(plan.lora_rank, lm_cfg.hidden),
                rng=rng_for(plan.seed, 11), alpha=plan.lora_alpha)
    trainable = adapter_tensors(pipeline.lm) + pipeline.projector.params.tensors()
    opt2 = AdamW(trainable, plan.lr_teacher, plan.betas, plan.adam_eps,
                 plan.weight_decay)
    order = rng_for(plan.seed, 12).permutation(len(train))
    lora_steps = max(1, plan.lora_steps)
    for i in range(lora_steps):
        start = (i * plan.batch_size) % len(train)
        batch = [train[order[(start + j) % len(train)]] for j in range(plan.batch_size)]
        lr = cosine_lr(i, lora_steps, plan.lr_teacher, plan.warmup_frac)
        bundle = teacher_finetune_step(pipeline, batch, opt2, vocab, lr)
        log.log(step + i, "train", "teacher_lora_ce", bundle.l_ce)
    return pipeline


# ---------------------------------------------------------------------------
# student distillation
# ---------------------------------------------------------------------------


def arm_weights(arm: str) -> tuple[float, float, float]:
    """Loss-arm name -> (w_ce, w_l2, w_kl)."""
    arms = {"full": (1.0, 1.0, 1.0), "ce": (1.0, 0.0, 0.0),
            "ce+l2": (1.0, 1.0, 0.0), "ce+kl": (1.0, 0.0, 1.0)}
    if arm not in arms:
        raise ParameterError(f"unknown loss arm {arm!r}; pick one of {sorted(arms)}")
    return arms[arm]


def train_student(plan: TrainPlan, splits, vocab: BpeVocab, teacher: Pipeline,
                  student_cfg: StudentConfig, weights=(1.0, 1.0, 1.0),
                  log: MetricsLog | None = None, verbose: bool = False):
    """Distill the frozen teacher into a fresh student.

    Returns (student pipeline loaded with its best-validation weights,
    bridge Linear or None, history dict).
    """
    train = splits["train"]
    if not train:
        raise ContractError("student training requires a non-empty train split")
    val = splits.get("val") or []
    log = log or MetricsLog()
    w_ce, w_l2, w_kl = (float(w) for w in weights)
    needs_teacher = w_l2 > 0 or w_kl > 0

    teacher.freeze()
    student = Pipeline(student_cfg, teacher.vision_config, seed=plan.seed,
                       shared_encoder=teacher.encoder)

    bridge = None
    bridge_params = ParamSet()
    if w_l2 > 0 and student_cfg.hidden != teacher.lm_config.hidden:
        bridge = Linear(bridge_params, "bridge", student_cfg.hidden,
                        teacher.lm_config.hidden, rng_for(plan.seed, 20))

    tensors = (student.projector.params.tensors() + student.lm.params.tensors()
               + bridge_params.tensors())
    opt = AdamW(tensors, plan.lr_student, plan.betas, plan.adam_eps, plan.weight_decay)

    cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def teacher_outputs(idx, sample):
        if not needs_teacher:
            return None, None
        if plan.cache_teacher and idx in cache:
            e1, tl = cache[idx]
            return GradTensor(e1), GradTensor(tl)
        hidden, logits, _ = teacher.forward_sample(sample.image, sample.ids, vocab)
        e1, tl = hidden.data, logits.data
        if plan.cache_teacher:
            cache[idx] = (e1, tl)
        return GradTensor(e1), GradTensor(tl)

    steps_per_epoch = math.ceil(len(train) / plan.effective_batch)
    total_steps = max(1, steps_per_epoch * plan.epochs)
    step = 0
    best = {"bleu": -1.0, "state": None, "bridge": None}
    history = {"val_bleu": [], "train_loss": []}
    t0 = time.time()
    for epoch in range(plan.epochs):
        order = rng_for(plan.seed, 21, epoch).permutation(len(train))
        epoch_loss = 0.0
        n_micro_total = 0
        for group_start in range(0, len(order), plan.effective_batch):
            group = order[group_start:group_start + plan.effective_batch]
            micro = list(_micro_batches(group, plan.batch_size))
            for mb in micro:
                totals = []
                for idx in mb:
                    s = train[idx]
                    e1, t_logits = teacher_outputs(int(idx), s)
                    hidden, logits, targets = student.forward_sample(s.image, s.ids, vocab)
                    bundle = kd_loss(e1, hidden, t_logits, logits, targets,
                                     weights=(w_ce, w_l2, w_kl), proj=bridge,
                                     temperature=plan.kl_temperature)
                    totals.append(bundle.total)
                    epoch_loss += bundle.l_total
                backward(ng.scale(_mean_loss(totals), 1.0 / len(micro)))
                n_micro_total += 1
            lr = cosine_lr(min(step, total_steps), total_steps, plan.lr_student,
                           plan.warmup_frac)
            opt.step(lr=lr)
            opt.zero_grad()
            step += 1
        mean_loss = epoch_loss / max(len(order), 1)
        log.log(step, "train", "loss_total", mean_loss)
        history["train_loss"].append(mean_loss)
        if val:
            subset = val[:max(plan.val_subset, 1)]
            bleu = corpus_bleu_on(student, subset, vocab, max_len=plan.max_gen_len)
            log.log(step, "val", "bleu", bleu)
            history["val_bleu"].append(bleu)
            if bleu > best["bleu"]:
                best["bleu"] = bleu
                best["state"] = student.state_dict()
                best["bridge"] = bridge_params.state_dict() if bridge else None
            _progress(f"[student] epoch {epoch + 1}/{plan.epochs} "
                      f"loss {mean_loss:.4f} val BLEU {bleu:.4f} "
                      f"({time.time() - t0:.0f}s)", verbose)
    if best["state"] is not None:
        student.load_state_dict(best["state"])
        if bridge is not None and best["bridge"] is not None:
            bridge_params.load_state_dict(best["bridge"])
    return student, bridge, history
