"""Train the iam+cdf model under routing designs A-D and report AP for each.

    python scripts/routing.py --color-mode distinct --epochs 60
"""

import argparse
import sys

from rgbdfuse.data import SceneConfig, generate_dataset
from rgbdfuse.model import ModelConfig
from rgbdfuse.train import TrainConfig, train


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--designs", default="A,B,C,D")
    ap.add_argument("--fusion", default="iam+cdf")
    ap.add_argument("--epochs", type=int, default=60)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--color-mode", default="distinct", choices=("distinct", "ambiguous"))
    ap.add_argument("--train-size", type=int, default=200)
    ap.add_argument("--val-size", type=int, default=50)
    ap.add_argument("--data-seed", type=int, default=0)
    args = ap.parse_args()

    scene = SceneConfig(color_mode=args.color_mode)
    train_s = generate_dataset(scene, args.train_size, args.data_seed)
    val_s = generate_dataset(scene, args.val_size, args.data_seed + 1_000_003)
    print("design,ap_seg,ap_seg50,ap_det50,seconds")
    for design in args.designs.split(","):
        cfg = ModelConfig(fusion_kind=args.fusion, routing_design=design, seed=args.seed)
        res = train(cfg, train_s, val_s, TrainConfig(epochs=args.epochs, seed=args.seed, eval_every=0),
                    log=lambda m: print(m, file=sys.stderr))
        r = res.report
        print(f"{design},{r.segm['ap']!r},{r.segm['ap50']!r},{r.bbox['ap50']!r},{res.seconds:.1f}", flush=True)


if __name__ == "__main__":
    main()
