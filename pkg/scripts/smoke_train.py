"""Train the desk-scale preset and report held-out PSNR against simple baselines.

    python3 scripts/smoke_train.py --out runs/smoke [--episodes 3000] [--stage2 500]

Writes log.csv and checkpoint.bin (plus stage2.* when --stage2 > 0) under --out.
"""
import argparse
import os
import time

import numpy as np

from rldiffusion import classic, trainer
from rldiffusion import net as netlib
from rldiffusion.image import psnr
from rldiffusion.smoke import (
    mean_greedy_psnr, mean_noisy_psnr, noisy_heldout, smoke_config, smoke_corpora, smoke_net_config,
    uniform_policy_psnr,
)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/smoke")
    ap.add_argument("--episodes", type=int, default=3000)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--stage2", type=int, default=0, help="stage-2 episodes after stage 1")
    args = ap.parse_args()
    os.makedirs(args.out, exist_ok=True)

    train_set, test_set = smoke_corpora()
    noisy = noisy_heldout(test_set)
    cfg = smoke_config(episodes=args.episodes, seed=args.seed)
    t0 = time.perf_counter()

    def progress(row):
        if row["episode"] % 250 == 0:
            print(f"episode {row['episode']:5d}  reward {row['mean_reward']:.3e}  "
                  f"value loss {row['value_loss']:.3f}  {time.perf_counter() - t0:.0f}s", flush=True)

    res = trainer.train(train_set, cfg, netlib.init_params(smoke_net_config()),
                        log_path=os.path.join(args.out, "log.csv"),
                        checkpoint_path=os.path.join(args.out, "checkpoint.bin"), progress=progress)
    print(f"stage 1: {(time.perf_counter() - t0) / max(args.episodes, 1):.3f} s/episode")

    pm_cfg = classic.DiffusionConfig(kappa=0.2, iterations=20, contrast=0.1)
    pm = np.mean([psnr(np.clip(classic.pm_denoise(g, pm_cfg), 0, 1), f) for g, f in zip(noisy, test_set)])
    uniform = uniform_policy_psnr(test_set, noisy)
    print(f"noisy input           {mean_noisy_psnr(test_set, noisy):6.2f} dB")
    for k, v in enumerate(uniform):
        print(f"uniform action {k}      {v:6.2f} dB")
    print(f"Perona-Malik (k=0.2)  {pm:6.2f} dB")
    print(f"greedy policy         {mean_greedy_psnr(res.params, test_set, noisy):6.2f} dB")

    if args.stage2:
        cfg2 = smoke_config(episodes=args.stage2, seed=args.seed, stage=2)
        res2 = trainer.train(train_set, cfg2, res.params, omega=res.omega, opt=res.opt,
                             log_path=os.path.join(args.out, "stage2.csv"),
                             checkpoint_path=os.path.join(args.out, "stage2.bin"))
        print(f"stage 2 greedy        {mean_greedy_psnr(res2.params, test_set, noisy):6.2f} dB")
        print("learned omega:\n", np.array2string(res2.omega, precision=4))


if __name__ == "__main__":
    main()
