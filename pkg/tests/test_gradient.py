import numpy as np

from gradcheck_toy import gradient_check


def test_total_loss_gradient_matches_central_differences():
    """16 random parameters of the toy configuration, double precision.

    The relative error is taken over the sampled gradient vector. At the
    1e-6 step the per-coordinate agreement is also checked, which isolates
    the analytic gradient from the truncation error that the L1 kinks add
    at the coarser step.
    """
    analytic, numeric = gradient_check(16, steps=(1e-4, 1e-6))
    coarse, fine = numeric
    rel = np.linalg.norm(analytic - coarse) / np.linalg.norm(analytic)
    per_coord = np.abs(analytic - coarse) / np.maximum(np.abs(analytic), np.abs(coarse))
    print(f"gradient check: vector rel err {rel:.2e}, worst coordinate {per_coord.max():.2e} (step 1e-4)")
    assert rel <= 1e-2
    fine_rel = np.abs(analytic - fine) / np.maximum(np.abs(analytic), np.abs(fine))
    assert fine_rel.max() <= 1e-3
