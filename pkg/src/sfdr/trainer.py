"""Two-stage optimization: teacher-forced cross-entropy, then self-critical
sequence training with a consensus-metric reward.

The cross-entropy stage averages the loss over two input pathways (real text
feature, learned constant) so that the image-only inference pathway is
trained jointly.  The reinforcement stage samples one sequence, uses the
greedy decode as baseline and applies the advantage-weighted log-likelihood
gradient of the sample.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import NumericError, Tensor
from .data_io import PAD, Corpus, FeatureBundle, TokenSeq, Vocabulary, build_vocab, tokenize
from .inference import greedy_decode, sample_sequence, sequence_log_prob_tensor
from .metrics import CiderIdf, cider_sentence
from .model import CaptionModel, ModelConfig


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, manifest: "RunManifest"):
        super().__init__(message)
        self.manifest = manifest


@dataclass
class TrainConfig:
    batch_size: int = 64
    epochs: int = 40
    lr: float = 5e-6
    stage: str = "ce"
    seed: int = 0
    grad_clip: float = 5.0
    min_count: int = 5

    def __post_init__(self):
        # lr 0 is allowed and freezes parameters (handy for identity checks)
        if self.lr < 0:
            raise ValueError(f"learning rate must be >= 0, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError(f"batch size must be >= 1, got {self.batch_size}")
        if self.stage not in ("ce", "scst"):
            raise ValueError(f"stage must be 'ce' or 'scst', got {self.stage!r}")


@dataclass
class EpochRecord:
    epoch: int
    stage: str
    train_loss: float
    val_cider: float | None


@dataclass
class RunManifest:
    """Everything needed to reproduce a run bit-identically."""

    config: dict[str, str]
    vocab_hash: str
    seed: int
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int | None = None
    notes: list[str] = field(default_factory=list)

    def to_text(self) -> str:
        lines = ["[run]"]
        for key in sorted(self.config):
            lines.append(f"{key}={self.config[key]}")
        lines.append(f"vocab.hash={self.vocab_hash}")
        lines.append(f"train.seed={self.seed}")
        if self.best_epoch is not None:
            lines.append(f"train.best_epoch={self.best_epoch}")
        lines.append("")
        lines.append("[epochs]")
        lines.append("epoch\tstage\ttrain_loss\tval_cider")
        for rec in self.epochs:
            val = "-" if rec.val_cider is None else f"{rec.val_cider:.6f}"
            lines.append(f"{rec.epoch}\t{rec.stage}\t{rec.train_loss:.6f}\t{val}")
        for note in self.notes:
            lines.append(f"note: {note}")
        return "\n".join(lines) + "\n"


class Adam:
    """Adaptive moment estimation with global-norm gradient clipping."""

    def __init__(self, params: list[Tensor], lr: float,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 grad_clip: float = 5.0):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.grad_clip = grad_clip
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def zero_grads(self) -> None:
        ad.zero_grads(self.params)

    def clip_grads(self) -> float:
        total = 0.0
        for p in self.params:
            if p.grad is not None:
                total += float(np.sum(p.grad * p.grad))
        norm = np.sqrt(total)
        if self.grad_clip > 0 and norm > self.grad_clip:
            scale = self.grad_clip / norm
            for p in self.params:
                if p.grad is not None:
                    p.grad *= scale
        return norm

    def step(self) -> None:
        self.clip_grads()
        self.t += 1
        correct1 = 1.0 - self.beta1 ** self.t
        correct2 = 1.0 - self.beta2 ** self.t
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g * g
            m_hat = self.m[i] / correct1
            v_hat = self.v[i] / correct2
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    # optimizer state travels with checkpoints so training can resume exactly
    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {"opt.t": np.array([float(self.t)])}
        for i in range(len(self.params)):
            out[f"opt.m.{i}"] = self.m[i]
            out[f"opt.v.{i}"] = self.v[i]
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        if not state:
            return
        self.t = int(state["opt.t"].reshape(-1)[0])
        for i in range(len(self.params)):
            self.m[i] = state[f"opt.m.{i}"].reshape(self.m[i].shape).copy()
            self.v[i] = state[f"opt.v.{i}"].reshape(self.v[i].shape).copy()


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def ce_loss(logits: Tensor, targets: list[int]) -> Tensor:
    """Summed negative log-likelihood of the targets; PAD positions excluded."""
    if logits.shape[0] != len(targets):
        raise ValueError(
            f"{logits.shape[0]} logit rows vs {len(targets)} targets")
    log_probs = ad.log_softmax_rows(logits)
    safe = [t if t != PAD else 0 for t in targets]
    picked = ad.pick_cols(log_probs, safe)
    keep = np.array([[1.0] if t != PAD else [0.0] for t in targets])
    return ad.smul(ad.sum_all(ad.mul_mask(picked, keep)), -1.0)


def caption_ce(model: CaptionModel, bundle: FeatureBundle, seq: TokenSeq,
               use_text: bool) -> Tensor:
    """Teacher-forced sentence loss for one caption."""
    inputs = seq.ids[:-1]
    targets = seq.ids[1:]
    out = model.logits(bundle, inputs, use_text=use_text)
    return ce_loss(out.logits, targets)


def batch_ce(model: CaptionModel, items: list[tuple[FeatureBundle, TokenSeq]],
             pathways: tuple[bool, ...] = (True, False)) -> Tensor:
    """Mean sentence loss over a batch, averaged over the input pathways."""
    losses = []
    for bundle, seq in items:
        routes = [p for p in pathways if not (p and bundle.clip_text is None)]
        for use_text in routes or [False]:
            losses.append(caption_ce(model, bundle, seq, use_text))
    total = losses[0]
    for term in losses[1:]:
        total = ad.add(total, term)
    return ad.smul(total, 1.0 / len(losses))


@dataclass
class ScstStepInfo:
    sample_reward: float
    greedy_reward: float
    advantage: float
    sampled: TokenSeq


def scst_step(model: CaptionModel, bundle: FeatureBundle, reward_fn,
              rng: np.random.Generator,
              use_text: bool = False) -> ScstStepInfo:
    """One self-critical gradient contribution for one bundle.

    Samples a sequence, scores it and the greedy baseline with the reward,
    and backpropagates -(advantage) * log-likelihood of the sample.  A zero
    advantage contributes exactly nothing.
    """
    if not bundle.captions:
        raise ValueError(f"{bundle.image_id}: SCST needs reference captions")
    sampled = sample_sequence(model, bundle, rng, use_text=use_text)
    greedy = greedy_decode(model, bundle, use_text=use_text)
    r_sample = reward_fn(sampled.tokens, bundle)
    r_greedy = reward_fn(greedy.tokens, bundle)
    advantage = r_sample - r_greedy
    if advantage != 0.0 and len(sampled.tokens.ids) > 1:
        log_prob = sequence_log_prob_tensor(model, bundle, sampled.tokens,
                                            use_text=use_text)
        ad.backward(ad.smul(log_prob, -advantage))
    return ScstStepInfo(sample_reward=r_sample, greedy_reward=r_greedy,
                        advantage=advantage, sampled=sampled.tokens)


def make_cider_reward(corpus: Corpus, vocab: Vocabulary):
    """Reward on the raw 0-10 scale with idf frozen from the train split."""
    train_refs = [[tokenize(c) for c in b.captions] for b in corpus.bundles("train")]
    idf = CiderIdf.from_references(train_refs)

    def reward(seq: TokenSeq, bundle: FeatureBundle) -> float:
        cand = vocab.decode(seq.content)
        refs = [tokenize(c) for c in bundle.captions]
        return cider_sentence(cand, refs, idf)

    return reward


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: CaptionModel                      # at its final state, resumable
    vocab: Vocabulary
    manifest: RunManifest
    optimizer: Adam
    best_state: dict[str, np.ndarray] | None = None
    best_epoch: int | None = None

    def load_best(self) -> None:
        """Swap the best-epoch parameters into the model."""
        if self.best_state is None:
            return
        named = self.model.named_params()
        for name, arr in self.best_state.items():
            named[name].data = arr.copy()


def corpus_cider(model: CaptionModel, corpus: Corpus, vocab: Vocabulary,
                 split: str, reward_idf: CiderIdf | None = None) -> float | None:
    """Greedy-decode a split and score it (raw scale); None if split empty."""
    bundles = corpus.bundles(split)
    if not bundles:
        return None
    refs = [[tokenize(c) for c in b.captions] for b in bundles]
    idf = reward_idf if reward_idf is not None else CiderIdf.from_references(refs)
    total = 0.0
    for bundle, ref in zip(bundles, refs):
        hyp = greedy_decode(model, bundle, use_text=False)
        total += cider_sentence(vocab.decode(hyp.tokens.content), ref, idf)
    return total / len(bundles)


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng((seed, epoch))


def train(corpus: Corpus, cfg: TrainConfig,
          model_cfg: ModelConfig | None = None,
          model: CaptionModel | None = None,
          vocab: Vocabulary | None = None,
          optimizer: Adam | None = None,
          start_epoch: int = 0,
          extra_config: dict[str, str] | None = None) -> TrainResult:
    """Run one training stage over the corpus train split.

    The manifest records per-epoch train loss and validation score.  The
    model is left at its final state so that training can resume exactly;
    the best-validation parameters (falling back to best train loss when the
    validation split is too small to score) ride along in the result.
    """
    train_bundles = corpus.bundles("train")
    if not train_bundles:
        raise ValueError("corpus has no training bundles")
    uncaptioned = [b.image_id for b in train_bundles if not b.captions]
    if uncaptioned:
        raise ValueError(
            f"training bundles need at least one caption; missing on "
            f"{uncaptioned[:3]}")
    if vocab is None:
        vocab = build_vocab(corpus.training_token_lists(), cfg.min_count)
    if model is None:
        if cfg.stage == "scst":
            raise ValueError("SCST stage requires a model pretrained with CE")
        model_cfg = model_cfg or ModelConfig(header=corpus.header,
                                             vocab_size=len(vocab))
        if model_cfg.vocab_size != len(vocab):
            raise ValueError(
                f"model vocab {model_cfg.vocab_size} != corpus vocab {len(vocab)}")
        model = CaptionModel(model_cfg, np.random.default_rng(cfg.seed))

    params = model.params()
    if optimizer is None:
        optimizer = Adam(params, lr=cfg.lr, grad_clip=cfg.grad_clip)

    config_pairs = dict(model.cfg.to_pairs())
    config_pairs.update({
        "train.batch_size": str(cfg.batch_size),
        "train.epochs": str(cfg.epochs),
        "train.lr": repr(cfg.lr),
        "train.stage": cfg.stage,
        "train.grad_clip": repr(cfg.grad_clip),
        "train.min_count": str(cfg.min_count),
    })
    config_pairs.update(extra_config or {})
    manifest = RunManifest(config=config_pairs, vocab_hash=vocab.content_hash(),
                           seed=cfg.seed)

    items = [(b, TokenSeq.from_caption(vocab, cap, model.cfg.max_len))
             for b in train_bundles for cap in b.captions]
    reward = make_cider_reward(corpus, vocab) if cfg.stage == "scst" else None
    val_scorable = len(corpus.bundles("val")) >= 2

    best_key: tuple | None = None
    best_state: dict[str, np.ndarray] | None = None
    best_epoch: int | None = None

    for epoch in range(start_epoch, start_epoch + cfg.epochs):
        rng = _epoch_rng(cfg.seed, epoch)
        order = rng.permutation(len(items))
        epoch_losses = []
        for lo in range(0, len(order), cfg.batch_size):
            batch = [items[i] for i in order[lo:lo + cfg.batch_size]]
            optimizer.zero_grads()
            try:
                if cfg.stage == "ce":
                    loss = batch_ce(model, batch)
                    ad.backward(loss)
                    epoch_losses.append(loss.item())
                else:
                    infos = [scst_step(model, b, reward, rng) for b, _ in batch]
                    epoch_losses.append(-float(np.mean(
                        [i.sample_reward for i in infos])))
            except NumericError as exc:
                manifest.notes.append(
                    f"diverged at epoch {epoch} batch {lo // cfg.batch_size}: {exc}")
                raise TrainingDiverged(str(exc), manifest) from exc
            optimizer.step()
        train_loss = float(np.mean(epoch_losses))
        val = corpus_cider(model, corpus, vocab, "val") if val_scorable else None
        manifest.epochs.append(EpochRecord(epoch=epoch, stage=cfg.stage,
                                           train_loss=train_loss, val_cider=val))
        key = (-val,) if val is not None else (train_loss,)
        if best_key is None or key < best_key:
            best_key = key
            best_epoch = epoch
            best_state = {name: t.data.copy()
                          for name, t in model.named_params().items()}

    manifest.best_epoch = best_epoch
    if not val_scorable:
        manifest.notes.append(
            "validation split too small for a consensus score; best epoch "
            "tracked by train loss")
    return TrainResult(model=model, vocab=vocab, manifest=manifest,
                       optimizer=optimizer, best_state=best_state,
                       best_epoch=best_epoch)
