"""Single-concept training: concept tokens, attention adapters and an image adapter."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import torch
from torch import nn

from ..concepts import ConceptRegistry, extract_concept_tokens
from ..objectives import AttentionMapSet, ConditionFeatures, LossWeights, TrainingBatch, prepare_masks, total_loss
from ..testbed.data import SynthConceptDataset
from ..testbed.model import Testbed, encode_images, wrap_adapters
from ..testbed.sampler import NoiseSchedule
from .checkpoint import AdapterCheckpoint
from .config import RunConfig

logger = logging.getLogger(__name__)


@dataclass
class TrainResult:
    checkpoint: AdapterCheckpoint
    log: list[dict[str, float]]
    eval_before: float
    eval_after: float
    base_hash_before: str
    base_hash_after: str
    model: Testbed = field(repr=False, default=None)


class ConceptTrainer:
    def __init__(self, config: RunConfig, base: Testbed, dataset: SynthConceptDataset):
        if dataset.concept is None:
            raise ValueError("dataset carries no concept description")
        if dataset.masks is None or len(dataset.masks) != len(dataset):
            raise ValueError("dataset has no masks")
        self.config = config
        self.dataset = dataset
        self.tb = copy.deepcopy(base)
        self.tb.registry = ConceptRegistry(base.registry.base_embeddings, max_len=base.registry.max_len)
        self.concept = self.tb.registry.register_concept(dataset.concept.name, dataset.concept.class_word,
                                                         seed=config.seed)
        self.adapters = wrap_adapters(self.tb.denoiser, config.adapter, config.factor, config.rank,
                                      seed=config.seed, detach_norm=config.detach_norm)
        width = self.tb.registry.width
        torch.manual_seed(config.seed)
        self.image_adapter = nn.Linear(width, width)
        self.weights = LossWeights(config.lambda_attn, config.lambda_w, config.lambda_con, config.swap_masks)
        self.schedule = NoiseSchedule()

        self.latents = encode_images(dataset.images)
        self.masks = torch.from_numpy(dataset.masks).float() / 255.0
        self.ids, specs = self.tb.registry.encode(dataset.prompts)
        rand_pos, class_pos, eos_pos = [], [], []
        for spec in specs:
            refs = [r for r in extract_concept_tokens(spec, self.tb.registry) if r.name == self.concept.name]
            if not refs:
                raise ValueError(f"training prompt {spec.template!r} does not mention <{self.concept.name}>")
            rand_pos.append(refs[0].rand_pos)
            class_pos.append(refs[0].class_pos)
            eos_pos.append(spec.tokens.index("<eos>"))
        self.positions = (torch.tensor(rand_pos), torch.tensor(class_pos))
        self.eos_pos = torch.tensor(eos_pos)

    def trainable(self) -> list[nn.Parameter]:
        params = [*self.concept.parameters()]
        for ad in self.adapters.values():
            params += [p for p in ad.parameters() if p.requires_grad]
        params += list(self.image_adapter.parameters())
        return params

    def features(self) -> ConditionFeatures:
        f_s = self.tb.text_encoder(self.tb.registry.embed(self.ids))
        pooled = f_s[torch.arange(len(self.ids)), self.eos_pos]
        f_i = self.image_adapter(self.tb.image_encoder(self.latents))
        return ConditionFeatures(f_s, f_i, pooled)

    def make_batch(self, gen: torch.Generator) -> TrainingBatch:
        n = len(self.latents)
        t = torch.randint(0, self.schedule.n, (n,), generator=gen)
        noise = torch.randn(self.latents.shape, generator=gen)
        return TrainingBatch(self.latents, self.masks, t, noise, self.schedule.add_noise(self.latents, noise, t))

    def predictor(self, z, t, ctx, hooks):
        return self.tb.denoiser(z, t, ctx, hooks)

    def loss(self, batch: TrainingBatch):
        return total_loss(self.predictor, batch, self.features(), self.positions, self.weights)

    def evaluate(self, batch: TrainingBatch) -> float:
        with torch.no_grad():
            return self.loss(batch).total.item()

    def run(self) -> TrainResult:
        cfg = self.config
        hash_before = self.tb.base_hash()
        eval_batch = self.make_batch(torch.Generator().manual_seed(cfg.seed + 7919))
        eval_before = self.evaluate(eval_batch)
        opt = torch.optim.Adam(self.trainable(), lr=cfg.lr)
        gen = torch.Generator().manual_seed(cfg.seed)
        log = []
        for step in range(cfg.train_steps):
            terms = self.loss(self.make_batch(gen))
            opt.zero_grad()
            terms.total.backward()
            opt.step()
            row = {"step": step, **terms.as_floats()}
            log.append(row)
            if step % 10 == 0 or step == cfg.train_steps - 1:
                logger.info("step %d total %.5f attn %.3e", step, row["total"], row["attn"])
        eval_after = self.evaluate(eval_batch)
        for p in self.trainable():
            p.requires_grad_(False)
        meta = {"base_seed": cfg.base_seed, "base_steps": cfg.base_steps, "config": cfg.digest(),
                "lambda_attn": cfg.lambda_attn}
        ckpt = AdapterCheckpoint.from_modules(self.adapters, self.tb.registry, self.image_adapter, meta)
        return TrainResult(ckpt, log, eval_before, eval_after, hash_before, self.tb.base_hash(), self.tb)


def train_single(config: RunConfig, dataset: SynthConceptDataset, base: Testbed) -> TrainResult:
    return ConceptTrainer(config.validate(), base, dataset).run()


def off_mask_attention(model: Testbed, dataset: SynthConceptDataset, prompt: str,
                       timesteps=(200, 400, 600, 800), seed: int = 0) -> float:
    """Mean concept-token cross-attention mass outside the foreground mask.

    Sums the ``V_rand`` and ``V_class`` maps outside the mask, averaged over
    images and timesteps, using text-only conditioning.
    """
    spec = model.registry.bind(prompt)
    refs = extract_concept_tokens(spec, model.registry)
    if not refs:
        raise ValueError(f"prompt {prompt!r} has no concept tokens")
    ref = refs[0]
    sched = NoiseSchedule()
    z0 = encode_images(dataset.images)
    masks = prepare_masks(torch.from_numpy(dataset.masks).float() / 255.0, 16)
    gen = torch.Generator().manual_seed(seed)
    total = 0.0
    with torch.no_grad():
        ctx, _ = model.context([spec] * len(z0))
        for t in timesteps:
            tt = torch.full((len(z0),), t, dtype=torch.long)
            zt = sched.add_noise(z0, torch.randn(z0.shape, generator=gen), tt)
            maps = AttentionMapSet()
            model.denoiser(zt, tt, ctx, {"cross_attn": maps.hook})
            for pos in ref.positions:
                total += float((maps.token_maps(pos, 16) * (1 - masks)).sum(dim=(-2, -1)).mean())
    return total / len(timesteps)
