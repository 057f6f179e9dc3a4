"""Single- and multi-concept generation on the testbed.

Multi-concept generation runs one reference branch per concept found in the
prompt (prompt ``a photo of <concept>``) in lockstep with the target branch.
Per step, in order:

1. every reference branch denoises step ``t`` and caches its decoder
   descriptors and self-attention values;
2. the target latent receives the layout-guidance update (if enabled);
3. the target denoises step ``t`` with values rebuilt by matching attention
   while ``t`` is inside the configured window.

Descriptors and concept masks come from the previous step of each branch.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from ..concepts import ConceptRef, extract_concept_tokens, make_reference_prompt
from ..layout import GuidanceState, decay_schedule, guidance_step, layout_loss, refine_activation, soft_iou
from ..objectives import AttentionMapSet
from ..sama import compose_values, concept_mask
from ..testbed.model import AttnMeta, Testbed, decode_latents
from ..testbed.sampler import NoiseSchedule, initial_latent, sample

logger = logging.getLogger(__name__)

MAP_RES = 16


def generate_single(model: Testbed, prompt: str, seed: int = 0, steps: int = 20) -> tuple[np.ndarray, list]:
    """Sample one image; unknown concept placeholders raise ``ConceptError``."""
    traj = sample(model, prompt, steps, seed)
    return decode_latents(traj[-1])[0], traj


@dataclass
class MultiOptions:
    steps: int = 20
    sama: bool = True
    sama_window: tuple[float, float] = (0.2, 0.8)
    sama_layer: str = "up16.attn1"
    guidance: bool = True
    lam: float = 0.1
    tau: float = 0.3
    phi0: float = 10.0
    order: str = "guidance_first"
    mask_override: str | None = None  # "zeros" disables injection while keeping the branches
    dump_dir: str | Path | None = None

    @classmethod
    def from_config(cls, cfg, **kw) -> "MultiOptions":
        return cls(steps=cfg.sampler_steps, sama=cfg.sama, sama_window=tuple(cfg.sama_window),
                   sama_layer=cfg.sama_layer, guidance=cfg.guidance, lam=cfg.guidance_lambda,
                   tau=cfg.guidance_tau, phi0=cfg.phi0, order=cfg.guidance_order, **kw)


@dataclass
class MultiResult:
    image: np.ndarray
    trajectory: list[torch.Tensor]
    concepts: list[str]
    n_reference_branches: int
    layout_log: list[dict] = field(default_factory=list)
    final_iou: list[float] = field(default_factory=list)
    sama_steps: list[int] = field(default_factory=list)

    @property
    def mean_final_iou(self) -> float:
        return float(np.mean(self.final_iou)) if self.final_iou else float("nan")


class _Branch:
    """Per-branch caches; nothing here is shared between branches."""

    def __init__(self, layer: str):
        self.layer = layer
        self.psi_prev: torch.Tensor | None = None
        self.psi_cur: torch.Tensor | None = None
        self.values: torch.Tensor | None = None
        self.maps_prev: AttentionMapSet | None = None
        self.maps_cur: AttentionMapSet | None = None

    def advance(self) -> None:
        self.psi_prev, self.maps_prev = self.psi_cur, self.maps_cur
        self.psi_cur = self.values = self.maps_cur = None


def _concept_maps(maps: AttentionMapSet, refs: list[ConceptRef]) -> list[torch.Tensor]:
    return [concept_mask(maps, r.positions, MAP_RES)[0] for r in refs]


def generate_multi(model: Testbed, prompt: str, seed: int = 0, options: MultiOptions | None = None) -> MultiResult:
    opts = options or MultiOptions()
    sched = NoiseSchedule()
    ts = sched.timesteps(opts.steps)
    spec = model.registry.bind(prompt)
    refs = extract_concept_tokens(spec, model.registry)
    if not refs:
        logger.warning("no concept tokens in %r, falling back to plain sampling", prompt)
        img, traj = generate_single(model, prompt, seed, opts.steps)
        return MultiResult(img, traj, [], 0)

    with torch.no_grad():
        ctx_t, _ = model.context([spec])
        ref_ctx = [model.context([make_reference_prompt(r.name, model.registry)])[0] for r in refs]
    target = _Branch(opts.sama_layer)
    branches = [_Branch(opts.sama_layer) for _ in refs]
    z_refs = [initial_latent(seed) for _ in refs]
    z = initial_latent(seed)
    traj = [z]
    state = GuidanceState(opts.lam, opts.tau, opts.phi0, opts.steps)
    lo, hi = opts.sama_window
    sama_steps = []
    dump = Path(opts.dump_dir) if opts.dump_dir else None
    if dump:
        dump.mkdir(parents=True, exist_ok=True)

    def guide(i: int, t: int, z: torch.Tensor) -> torch.Tensor:
        phi = decay_schedule(i, opts.steps, opts.phi0)
        if not opts.guidance or state.anchors is None or phi == 0.0:
            return z
        z_req = z.detach().requires_grad_(True)
        maps = AttentionMapSet()
        model.denoiser(z_req, torch.tensor(t), ctx_t, {"cross_attn": maps.hook})
        current = [refine_activation(m, opts.lam, opts.tau) for m in _concept_maps(maps, refs)]
        loss = layout_loss(current, state.anchors)
        (grad,) = torch.autograd.grad(loss, z_req)
        ious = [float(soft_iou(a.detach(), b)) for a, b in zip(current, state.anchors)]
        state.log.append({"step": i, "t": t, "layout_loss": float(loss.detach()), "phi": phi, "iou": ious,
                          "grad_norm": float(grad.norm())})
        return guidance_step(z, grad, phi).detach()

    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else None
        active = opts.sama and lo * opts.steps <= i < hi * opts.steps and i > 0

        # reference branches, step t
        for k, br in enumerate(branches):
            def ref_hook(meta: AttnMeta, x, q, kk, v, br=br):
                if meta.name == br.layer:
                    br.psi_cur, br.values = x.detach(), v.detach()
            with torch.no_grad():
                eps = model.denoiser(z_refs[k], torch.tensor(t), ref_ctx[k], {"self_attn": ref_hook})
                z_refs[k] = sched.ddim_step(z_refs[k], eps, t, t_prev)

        if opts.order == "guidance_first":
            z = guide(i, t, z)

        masks = None
        if active:
            if opts.mask_override == "zeros":
                masks = [torch.zeros(MAP_RES * MAP_RES) for _ in refs]
            else:
                masks = [m.flatten() for m in _concept_maps(target.maps_prev, refs)]
            sama_steps.append(i)

        def trg_hook(meta: AttnMeta, x, q, kk, v):
            if meta.name != target.layer:
                return None
            target.psi_cur = x.detach()
            if masks is None:
                return None
            pairs = [(br.psi_prev[0], br.values[0]) for br in branches]
            out = compose_values(v[0], target.psi_prev[0], pairs, masks)
            if dump:
                _dump_step(dump, i, masks, out)
            return out.v_w[None]

        maps = AttentionMapSet()
        with torch.no_grad():
            eps = model.denoiser(z, torch.tensor(t), ctx_t, {"cross_attn": maps.hook, "self_attn": trg_hook})
            z = sched.ddim_step(z, eps, t, t_prev)
        target.maps_cur = maps
        if state.anchors is None:
            state.capture_anchor(_concept_maps(maps, refs))

        if opts.order == "denoise_first" and t_prev is not None:
            z = guide(i + 1, t_prev, z) if i + 1 < opts.steps else z

        traj.append(z)
        target.advance()
        for br in branches:
            br.advance()

    final = [refine_activation(m, opts.lam, opts.tau) for m in _concept_maps(target.maps_prev, refs)]
    final_iou = [float(soft_iou(a, b)) for a, b in zip(final, state.anchors)]
    if dump:
        _write_layout_log(dump / "layout_log.txt", state.log)
    return MultiResult(decode_latents(z)[0], traj, [r.name for r in refs], len(branches), state.log, final_iou,
                       sama_steps)


def _dump_step(root: Path, step: int, masks, out) -> None:
    for k, (m, match) in enumerate(zip(masks, out.matches)):
        side = int(round(m.numel() ** 0.5))
        Image.fromarray((m.view(side, side).clamp(0, 1) * 255).round().byte().numpy(), "L").save(
            root / f"step{step:03d}_mask{k}.png")
        flow = (match.flow.view(side, side).float() / max(m.numel() - 1, 1) * 255).round().byte().numpy()
        Image.fromarray(flow, "L").save(root / f"step{step:03d}_flow{k}.png")
    norms = out.v_w.norm(dim=-1)
    with open(root / "vw_stats.txt", "a") as fh:
        fh.write(f"{step}\t{norms.mean():.6f}\t{norms.min():.6f}\t{norms.max():.6f}\n")


def _write_layout_log(path: Path, log: list[dict]) -> None:
    lines = ["step\tlayout_loss\tphi\tiou"]
    for row in log:
        lines.append(f"{row['step']}\t{row['layout_loss']:.6f}\t{row['phi']:.4f}\t"
                     + ",".join(f"{v:.4f}" for v in row["iou"]))
    path.write_text("\n".join(lines) + "\n")
