import torch

from m4fuse.gradcheck import kink_aware_check, relative_error, tiny_config


def test_relative_error_floor():
    assert relative_error(0.0, 0.0) == 0.0
    assert relative_error(1.0, 1.001) < 1e-3


def test_smooth_function_passes():
    p = torch.tensor([0.3, -0.7], dtype=torch.float64, requires_grad=True)
    f = lambda: (torch.sin(p) * p).sum()
    f().backward()
    rec = kink_aware_check(f, p, p.grad, torch.tensor([0.6, 0.8], dtype=torch.float64))
    assert rec["rel_error"] < 1e-6 and not rec["kink_crossed"]


def test_tiny_config_shape():
    cfg = tiny_config()
    assert cfg.widths() == (8, 8, 8, 8, 8) and cfg.dropout_p == 0.0 and cfg.num_experts == 2
