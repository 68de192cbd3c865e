"""Efficiency accounting: analytic parameter and multiply-accumulate counts
plus wall-clock latency/throughput measurement."""

import resource
import statistics
import sys
import time
from dataclasses import dataclass, asdict

import torch
from torch import nn

from .errors import BenchError, ConfigurationError


@dataclass
class BenchReport:
    params: int
    flops: int  # multiply-accumulates at the stated input size
    latency_s: float
    throughput_ips: float
    peak_mem_bytes: int
    peak_mem_supported: bool
    batch_size: int
    image_size: int
    warmup: int
    trials: int

    def to_dict(self):
        d = asdict(self)
        d["flops_convention"] = "multiply-accumulates; norms and activations counted as zero"
        return d


def count_params(model):
    """Total trainable parameter elements."""
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def count_flops(model, input_shape):
    """Analytic multiply-accumulate count for one forward pass.

    Convolutions contribute Kh*Kw*(Cin/groups)*Cout*Hout*Wout, dense layers
    in*out per position; normalization and activations count as zero. Shape
    propagation runs a hooked forward pass, so meta-device models work and
    cost nothing.
    """
    total = 0

    def hook(module, inputs, output):
        nonlocal total
        if isinstance(module, nn.Conv2d):
            kh, kw = module.kernel_size
            cout, hout, wout = output.shape[-3:]
            batch = output.shape[0] if output.dim() == 4 else 1
            total += batch * kh * kw * (module.in_channels // module.groups) * cout * hout * wout
        elif isinstance(module, nn.Conv1d):
            (k,) = module.kernel_size
            cout, lout = output.shape[-2:]
            batch = output.shape[0] if output.dim() == 3 else 1
            total += batch * k * (module.in_channels // module.groups) * cout * lout
        elif isinstance(module, nn.Linear):
            positions = 1
            for d in inputs[0].shape[:-1]:
                positions *= d
            total += positions * module.in_features * module.out_features

    handles = [m.register_forward_hook(hook) for m in model.modules()
               if isinstance(m, (nn.Conv2d, nn.Conv1d, nn.Linear))]
    try:
        device = next(model.parameters()).device
        x = torch.zeros(*input_shape, device=device)
        was_training = model.training
        model.eval()
        with torch.no_grad():
            model(x)
        if was_training:
            model.train()
    finally:
        for h in handles:
            h.remove()
    return int(total)


def _peak_rss_bytes():
    try:
        rss = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss
        # ru_maxrss is KiB on Linux, bytes on macOS
        return int(rss * 1024) if sys.platform != "darwin" else int(rss), True
    except (ValueError, OSError):
        return 0, False


def measure(model, batch_size=1, image_size=224, warmup=10, trials=30, seed=0):
    """Median wall-clock latency over ``trials`` forward passes on a fixed
    random input, after ``warmup`` discarded passes."""
    if trials < 3:
        raise ConfigurationError("trials must be >= 3")
    gen = torch.Generator().manual_seed(seed)
    try:
        x = torch.randn(batch_size, 3, image_size, image_size, generator=gen)
    except RuntimeError as e:
        raise BenchError(f"cannot allocate input at batch size {batch_size}: {e}") from e

    model.eval()
    times = []
    try:
        with torch.no_grad():
            for _ in range(warmup):
                model(x)
            for _ in range(trials):
                t0 = time.perf_counter()
                model(x)
                times.append(time.perf_counter() - t0)
    except RuntimeError as e:
        if "memory" in str(e).lower():
            raise BenchError(f"out of memory at batch size {batch_size}") from e
        raise

    latency = statistics.median(times)
    peak, supported = _peak_rss_bytes()
    return BenchReport(
        params=count_params(model),
        flops=count_flops(model, (1, 3, image_size, image_size)),
        latency_s=latency,
        throughput_ips=batch_size / latency,
        peak_mem_bytes=peak,
        peak_mem_supported=supported,
        batch_size=batch_size, image_size=image_size,
        warmup=warmup, trials=trials)
