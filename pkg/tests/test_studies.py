"""Directional study claims (longer-running paired experiments).

These mirror the comparison experiments the attack tooling exposes: the
regularized default beats the regularizer-free run on structural quality,
and the gray start beats the random start on fidelity.
"""

from gradlab.experiments import ablation_sweep, paired_init_comparison


SEEDS = range(6)
ITERS = 1200


def test_default_regularizers_beat_none_on_ssim():
    medians, _ = ablation_sweep(SEEDS, max_iters=ITERS,
                                stages=[("none", dict(alpha_tv=0.0, alpha_mean=0.0,
                                                      alpha_ca=0.0)),
                                        ("full", dict())])
    assert medians["full"] >= medians["none"]
    print(f"\nmedian SSIM: default {medians['full']:.4f} >= "
          f"no-regularizers {medians['none']:.4f}")


def test_gray_init_beats_random_on_psnr():
    medians, _ = paired_init_comparison(SEEDS, max_iters=ITERS)
    assert medians["gray"] >= medians["random"]
    print(f"\nmedian PSNR: gray {medians['gray']:.2f} dB >= "
          f"random {medians['random']:.2f} dB")
