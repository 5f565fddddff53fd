"""Target-F1 trajectories of each method under one candidate target shift.

Usage (key=value arguments, all optional):

    python3 explore_shift.py tag=ST steps=300 \
        shift='{"contrast_gamma_range":[1,1],"streak_count":10,"streak_amplitude":0.25}' \
        methods=source_only,ours,mdd,dann

Prints, per method, the target-test F1 every ``every`` steps (starting from
the pretrained model), the final per-volume std, and for the discrepancy
methods the mean adversary terms over the last 50 iterations.  ``soft=1``
swaps the hard pseudo-label discrepancy for a soft-target cross-entropy.
Target labels are used only by the monitor, never by training.
This produced ``raw_runs.log``; the summary lives in ``README.md``.
"""
from __future__ import annotations

import copy
import json
import os
import sys
import time
from dataclasses import replace

import numpy as np
import torch

import tomdd.losses as L
from tomdd.adapt import AdaptConfig, adapt, pretrain_source
from tomdd.data import generate_in_memory, split
from tomdd.metrics import evaluate
from tomdd.model import DESK_SCALE, build_unet
from tomdd.phantom import PhantomSpec, ShiftParams, split_volumes


def soft_discrepancy(adv, ref):
    adv, _ = L._batched(adv)
    ref, _ = L._batched(ref)
    p = torch.softmax(ref.detach(), 1)
    q = torch.softmax(adv, 1).clamp_min(L.EPS)
    return L.LossValue(-(p * torch.log(q)).sum(1).mean())


def main(argv):
    args = dict(a.split("=", 1) for a in argv)
    overrides = json.loads(args.get("shift", "{}"))
    if "contrast_gamma_range" in overrides:
        overrides["contrast_gamma_range"] = tuple(overrides["contrast_gamma_range"])
    # the historical runs used the pre-streak defaults as the base
    base = replace(ShiftParams(), contrast_gamma_range=(0.6, 0.8), streak_count=0)
    shift = replace(base, **overrides)
    sv, sl, tv = int(args.get("sv", 24)), int(args.get("sl", 6)), int(args.get("tv", 42))
    src = generate_in_memory(PhantomSpec(volumes=sv, slices_per_volume=sl, seed=100, shift=shift), "source")
    tgt = generate_in_memory(PhantomSpec(volumes=tv, slices_per_volume=sl, seed=200, shift=shift), "target")
    s = split(src, split_volumes(src.volumes, 100))
    t = split(tgt, split_volumes(tgt.volumes, 200))
    seed = int(args.get("seed", 0))
    if args.get("soft") == "1":
        L.discrepancy_ce = soft_discrepancy
    cfg = AdaptConfig(pretrain_steps=int(args.get("pre", 300)), adapt_steps=int(args.get("steps", 200)), seed=seed,
                      eval_every=int(args.get("every", 50)), select="last")
    cache = args.get("prefile", f"pretrained_seed{seed}.pt")
    model = build_unet(DESK_SCALE, seed)
    if os.path.exists(cache):
        model.load_state_dict(torch.load(cache))
    else:
        model, _ = pretrain_source(model, s["train"], cfg, s["val"])
        torch.save(model.state_dict(), cache)
    tag = args.get("tag", "")
    r0 = evaluate(model, t["test"])
    print(tag, "pre tgt", round(r0.mean_f1, 4), round(r0.std_f1, 4), flush=True)

    def monitor(step, m):
        return round(evaluate(m, t["test"]).mean_f1, 4)

    for method in args.get("methods", "ours").split(","):
        c = replace(cfg, method=method)
        t0 = time.time()
        adapted, hist = adapt(copy.deepcopy(model), s["train"], t["train"].strip_labels(), c, s["val"],
                              monitor=monitor)
        extra = ""
        if method in ("ours", "mdd"):
            recs = [r for r in hist.records if r["objective"] in ("adversary", "mdd_adversary")][-50:]
            extra = "ce_tgt %.3f ce_src %.3f" % (np.mean([r["ce_tgt"] for r in recs]),
                                                 np.mean([r["ce_src"] for r in recs]))
        if method == "dann":
            extra = "dacc %.2f -> %.2f" % (np.mean([r["domain_acc"] for r in hist.records[:30]]),
                                           np.mean([r["domain_acc"] for r in hist.records[-30:]]))
        print(tag, method, round(time.time() - t0), [c_["monitor"] for c_ in hist.checkpoints],
              "std", round(evaluate(adapted, t["test"]).std_f1, 3), extra, flush=True)


if __name__ == "__main__":
    main(sys.argv[1:])
