"""main.py

Runs the score-based generative modelling experiments from a YAML
configuration.

- ``kl-dynamics``, ``modes-shift`` and ``capacity-sweep`` train score networks
- ``bounds`` and ``mc-gap`` tabulate the theoretical bounds
- ``verify`` checks the library's invariants and exits non-zero on a failure

Exit codes: 0 on success, 1 when ``verify`` finds a failing property or two
compared runs differ, 2 on a configuration error, 3 when training diverges.
"""


import logging
import sys

from argparse import ArgumentParser

from sgl.config import EXPERIMENTS, load_config
from sgl.errors import ConfigError, ManifestError, NumericalBlowupError
from sgl.experiments import run_experiment
from sgl.verify import compare_runs


logger = logging.getLogger(__name__)


def main(argv=None):
    parser = ArgumentParser(
        description="Train score-based generative models and evaluate their "
        "generalization bounds"
    )

    parser.add_argument(
        "experiment",
        type=str,
        choices=EXPERIMENTS,
        help="the experiment to run",
    )

    parser.add_argument(
        "--config",
        "-c",
        type=str,
        required=False,
        help="path to a YAML configuration file",
        dest="config",
    )

    parser.add_argument(
        "--out",
        "-o",
        type=str,
        required=False,
        help="the output directory",
        dest="out_dir",
    )

    parser.add_argument(
        "--seed",
        "-s",
        type=int,
        required=False,
        help="the master seed",
        dest="seed",
    )

    parser.add_argument(
        "--workers",
        "-w",
        type=int,
        required=False,
        help="the number of parallel training runs",
        dest="workers",
    )

    parser.add_argument(
        "--compare",
        nargs=2,
        metavar=("DIR_A", "DIR_B"),
        required=False,
        help="with verify: compare the artifacts of two finished runs instead",
        dest="compare",
    )

    parser.add_argument(
        "--verbose",
        "-v",
        action="store_true",
        help="log debug messages and progress bars",
        dest="verbose",
    )

    parser.add_argument(
        "overrides",
        nargs="*",
        help="configuration overrides of the form section.key=value",
    )

    parser.set_defaults(verbose=False)

    args = parser.parse_args(argv)

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(message)s",
    )

    if args.compare:
        try:
            different = compare_runs(*args.compare)

        except ManifestError as error:
            logger.error("Error: %s", error)
            return 2

        for name in different:
            logger.info("Differs: %s", name)

        return 1 if different else 0

    try:
        config = load_config(args.config, args.overrides, args.out_dir, args.seed, args.workers, args.experiment)
        result = run_experiment(config)

    except ConfigError as error:
        logger.error("Error: %s", error)
        return 2

    except NumericalBlowupError as error:
        logger.error("Error: %s", error)
        return 3

    return 0 if result.passed else 1


if __name__ == "__main__":
    sys.exit(main())
