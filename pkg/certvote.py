"""
Ligne de commande certvote.

Exemples :
  python certvote.py pipeline --seed 7 --out output/run_7
  python certvote.py train --config smoke.cfg --members 3
  python certvote.py grid --sample 0 --target 3 --sigma 0.3
"""

import argparse
import logging
import sys

from config import STAGES, load_config
from ensemble_defense import QueryPolicy
from errors import CertvoteError
from harness import PipelineRunner, grid_rows

COMMAND_STAGES = {
    "train": ("data", "train"),
    "attack": ("data", "attack"),
    "superimpose": ("superimpose",),
    "evaluate": ("evaluate",),
    "certify": ("data", "certify"),
    "pipeline": STAGES,
}

logger = logging.getLogger("certvote")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="fichier JSON ou key=value")
    common.add_argument("--seed", type=int, default=None, help="graine racine")
    common.add_argument("--out", default=None, help="répertoire de sortie")
    common.add_argument("--members", type=int, default=None, help="taille m de l'ensemble")
    common.add_argument("--sigma", type=float, default=None, help="écart-type du bruit gaussien")
    common.add_argument("--rv-alpha", type=float, default=None, help="seuil de la vérification de rang")
    common.add_argument("--verbose", action="store_true", help="journal DEBUG")

    parser = argparse.ArgumentParser(
        description="Défense par ensembles à températures, logits bruités et certification",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=__doc__,
    )
    commands = parser.add_subparsers(dest="command", required=True)
    for name in COMMAND_STAGES:
        commands.add_parser(name, parents=[common])
    grid = commands.add_parser("grid", parents=[common])
    grid.add_argument("--sample", type=int, default=0, help="indice de l'échantillon de validation")
    grid.add_argument("--target", type=int, required=True, help="label cible")
    return parser


def overrides_from(args):
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out"] = args.out
    if args.members is not None:
        overrides["members"] = args.members
    if args.sigma is not None:
        overrides["noise_sigma"] = args.sigma
        if args.sigma > 0:
            overrides["certify.sigma"] = args.sigma
    if args.rv_alpha is not None:
        overrides["rv_alpha"] = args.rv_alpha
        overrides["certify.rv_alpha"] = args.rv_alpha
    return overrides


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s")
    try:
        cfg = load_config(args.config, overrides_from(args))
        runner = PipelineRunner(cfg)
        if args.command == "grid":
            runner.run(("data",))
            policy = QueryPolicy(noise_sigma=cfg.noise_sigma, seed=cfg.stage_seed("report"))
            labels = runner.grid(args.sample, args.target, policy)
            for row in grid_rows(labels):
                logger.info(" ".join(str(label) for label in row))
        else:
            runner.run(COMMAND_STAGES[args.command])
    except CertvoteError as e:
        logger.error(f"❌ Erreur: {e}")
        return e.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
