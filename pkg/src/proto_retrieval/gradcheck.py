"""Central finite-difference verification of the training losses' autograd gradients.

Each loss is rebuilt at tiny sizes in float64 together with the module whose
parameters feed it. Coordinates whose perturbation moves a non-smooth point
(a clamp, a hinge, an argmax) are reported as excluded rather than compared.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import torch

from .objectives import (
    LOG_EPS,
    CrossModalDecoder,
    UniModalDecoder,
    crecon_loss,
    guidance_bce,
    guidance_loss,
    ortho_loss,
    retrieval_loss,
    urecon_loss,
)
from .prototypes import PrototypeGenerator, prototype_similarity

FD_STEP = 1e-3
TOLERANCE = 1e-4
LOSSES = ("crecon", "urecon", "attn", "ortho", "ret")


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    n_checked: int
    n_excluded: int
    per_tensor: dict = field(default_factory=dict)
    excluded: list = field(default_factory=list)

    def passed(self, tol: float = TOLERANCE) -> bool:
        return self.n_checked > 0 and self.max_rel_error < tol


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    """``max|a - n|`` scaled by the larger of the two gradients' max magnitudes."""
    if analytic.numel() == 0:
        return 0.0
    scale = max(float(analytic.abs().max()), float(numeric.abs().max()), 1e-8)
    return float((analytic - numeric).abs().max()) / scale


def check_gradients(loss_fn: Callable[[], torch.Tensor], tensors: dict[str, torch.Tensor],
                    signature: Callable[[], object] | None = None, step: float = FD_STEP,
                    name: str = "") -> GradCheckResult:
    """Compare autograd against central differences for every entry of ``tensors``.

    ``loss_fn`` reads the tensors by closure, so they are perturbed in place.
    ``signature`` returns a hashable description of the non-smooth active set;
    a coordinate is excluded when either perturbation changes it.
    """
    values = list(tensors.values())
    loss = loss_fn()
    grads = torch.autograd.grad(loss, values, allow_unused=True)
    base_sig = signature() if signature else None
    per_tensor, excluded, checked = {}, [], 0
    with torch.no_grad():
        for (tname, t), g in zip(tensors.items(), grads):
            analytic = torch.zeros_like(t) if g is None else g
            numeric = torch.zeros_like(t)
            keep = torch.ones(t.numel(), dtype=torch.bool)
            flat = t.view(-1)
            for i in range(t.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                plus, sig_plus = float(loss_fn()), signature() if signature else None
                flat[i] = orig - step
                minus, sig_minus = float(loss_fn()), signature() if signature else None
                flat[i] = orig
                if signature and (sig_plus != base_sig or sig_minus != base_sig):
                    keep[i] = False
                    excluded.append((tname, i))
                    continue
                numeric.view(-1)[i] = (plus - minus) / (2 * step)
            a, n = analytic.reshape(-1)[keep], numeric.reshape(-1)[keep]
            per_tensor[tname] = relative_error(a, n)
            checked += int(keep.sum())
    return GradCheckResult(name, max(per_tensor.values(), default=0.0), checked, len(excluded),
                           per_tensor, excluded)


def _leaf(*shape, scale=1.0):
    return (torch.randn(*shape, dtype=torch.float64) * scale).requires_grad_(True)


def _params(module: torch.nn.Module, prefix: str) -> dict:
    return {f"{prefix}.{k}": p for k, p in module.named_parameters()}


def _bits(*tensors) -> bytes:
    return b"".join(t.detach().numpy().tobytes() for t in tensors)


# ── Per-loss problems ───────────────────────────────────────

def _crecon(dim, n_protos, batch, seq_len):
    decoder = CrossModalDecoder(dim, dim, heads=2, max_len=seq_len).double()
    tokens = _leaf(batch, seq_len, dim)
    targets = _leaf(batch, seq_len, dim)
    prototype = _leaf(batch, 1, dim)
    masked_idx = torch.tensor([1, 3])

    def fn():
        return crecon_loss(decoder(tokens, prototype), targets, masked_idx)

    return fn, {"tokens": tokens, "targets": targets, "prototype": prototype,
                **_params(decoder, "decoder")}, None


def _urecon(dim, n_protos, batch, seq_len):
    decoder = UniModalDecoder(dim, max_len=seq_len).double()
    prototypes = _leaf(batch, n_protos, dim)
    target = _leaf(batch, seq_len, dim)

    def fn():
        recon, _ = decoder(prototypes, seq_len)
        return urecon_loss(recon, target)

    return fn, {"prototypes": prototypes, "target": target, **_params(decoder, "decoder")}, None


def _attn(dim, n_protos, batch, seq_len, beta=0.2):
    generator = PrototypeGenerator(dim, n_protos, heads=2, init_scale=1.0).double()
    video = _leaf(batch, seq_len, dim)
    query = _leaf(batch, dim)
    membership = torch.zeros(batch, seq_len, dtype=torch.float64)
    membership[:, : seq_len // 2] = 1.0
    membership[:, seq_len // 2] = 0.5
    labels = torch.tensor([1.0, 0.0] * (batch // 2) + [1.0] * (batch % 2), dtype=torch.float64)

    def forward():
        out = generator(video)
        best = prototype_similarity(out.prototypes, query).argmax(dim=-1)
        return out, best

    def fn():
        out, best = forward()
        return guidance_loss(out.trace.last, membership, best, labels, beta)

    def signature():
        with torch.no_grad():
            out, best = forward()
            alpha = (out.trace.last[torch.arange(batch), best] * membership).sum(-1)
        return _bits(best, _clamp_state(alpha, beta))

    return fn, {"video": video, "query": query, **_params(generator, "generator")}, signature


def _clamp_state(alpha, beta):
    pos, neg = alpha + beta, 1.0 - (alpha - beta)
    return torch.stack([pos >= 1.0, pos <= LOG_EPS, neg >= 1.0, neg <= LOG_EPS])


def _ortho(dim, n_protos, batch, seq_len):
    prototypes = _leaf(batch, n_protos, dim)

    def signature():
        with torch.no_grad():
            unit = torch.nn.functional.normalize(prototypes, dim=-1)
            return _bits(unit @ unit.transpose(-1, -2) > 0)

    return (lambda: ortho_loss(prototypes)), {"prototypes": prototypes}, signature


def _ret(dim, n_protos, batch, seq_len, margin=0.2, lambda_nce=0.03):
    prototypes = _leaf(batch, n_protos, dim)
    queries = _leaf(batch, dim)
    pairing = torch.arange(batch)

    def sims_and_best():
        per_proto = prototype_similarity(prototypes[None], queries[:, None])  # (Q, V, L^p)
        return per_proto.max(dim=-1)

    def fn():
        return retrieval_loss(sims_and_best().values, pairing, margin, lambda_nce)

    def signature():
        with torch.no_grad():
            sims, best = sims_and_best()
            pos = sims.diagonal()
            neg = sims + torch.where(torch.eye(batch, dtype=torch.bool), -torch.inf, 0.0)
            hard_q, arg_q = neg.max(dim=1)
            hard_v, arg_v = neg.max(dim=0)
            return _bits(best, arg_q, arg_v, margin + hard_q - pos > 0, margin + hard_v - pos > 0)

    return fn, {"prototypes": prototypes, "queries": queries}, signature


_PROBLEMS = {"crecon": _crecon, "urecon": _urecon, "attn": _attn, "ortho": _ortho, "ret": _ret}


def grad_check(loss: str, dim: int = 8, n_prototypes: int = 3, batch: int = 4, seq_len: int = 6,
               seed: int = 0, step: float = FD_STEP) -> GradCheckResult:
    """Finite-difference check of one loss (``crecon``, ``urecon``, ``attn``, ``ortho`` or ``ret``)."""
    if loss not in _PROBLEMS:
        raise KeyError(f"unknown loss {loss!r}; choose from {', '.join(LOSSES)}")
    torch.manual_seed(seed)
    fn, tensors, signature = _PROBLEMS[loss](dim, n_prototypes, batch, seq_len)
    return check_gradients(fn, tensors, signature, step, name=loss)


def guidance_point_check(alpha: float, label: float, beta: float = 0.2,
                         step: float = FD_STEP) -> GradCheckResult:
    """Check the guidance loss at one attention-mass value; clamp boundaries come back excluded."""
    a = torch.tensor([alpha], dtype=torch.float64, requires_grad=True)
    y = torch.tensor([label], dtype=torch.float64)
    return check_gradients(
        lambda: guidance_bce(a, y, beta).sum(),
        {"alpha": a},
        lambda: _bits(_clamp_state(a.detach(), beta)),
        step,
        name="guidance_point",
    )
