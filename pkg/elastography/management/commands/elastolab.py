import json
import logging
from pathlib import Path

from django.conf import settings
from django.core.management.base import BaseCommand, CommandError

from elastography import pipeline
from elastography.config import RunConfig, load_config
from elastography.exceptions import FieldFormatError, NumericalError, ValidationError
from elastography.fields import PhantomClass
from elastography.services.performance_monitor import get_performance_stats

logger = logging.getLogger(__name__)

EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3


def _add_common(parser):
    parser.add_argument("--config", help="TOML run configuration (default: ELASTOLAB_CONFIG)")
    parser.add_argument("--seed", type=int, help="Override the configured global seed")
    parser.add_argument("--out", help="Run directory (default: config output_dir or ELASTOLAB_OUTPUT_DIR)")


class Command(BaseCommand):
    help = "Phantom generation, simulation, dataset build, training, inversion, evaluation and reporting"

    def add_arguments(self, parser):
        stages = parser.add_subparsers(dest="stage", required=True, metavar="stage")

        phantom = stages.add_parser("phantom", help="Sample phantom specs and render their stiffness")
        phantom.add_argument("--class", dest="phantom_class", choices=[c.value for c in PhantomClass])
        phantom.add_argument("--count", type=int)
        _add_common(phantom)

        simulate = stages.add_parser("simulate", help="Solve the wave equation for phantom specs")
        simulate.add_argument("specs", nargs="*", help="Spec JSON files (default: every spec in the run)")
        _add_common(simulate)

        dataset = stages.add_parser("dataset", help="Split simulated fields and tile them into patch sets")
        dataset.add_argument("fields", nargs="*", help="Displacement files; *_mu.mreg partners are implied")
        _add_common(dataset)

        train = stages.add_parser("train", help="Train the network on the dataset patch sets")
        train.add_argument("--dataset", help="Directory holding train.mrep / val.mrep")
        _add_common(train)

        invert = stages.add_parser("invert", help="Invert displacement fields to stiffness maps")
        invert.add_argument("--method", choices=pipeline.METHODS, required=True)
        invert.add_argument("--checkpoint", help="Trained model for --method dime")
        invert.add_argument("fields", nargs="*", help="Displacement files (default: test split, else all)")
        _add_common(invert)

        evaluate = stages.add_parser("evaluate", help="Compare inverted maps with ground truth")
        evaluate.add_argument("--cases", nargs="*", help="Case ids (default: every inverted case)")
        _add_common(evaluate)

        report = stages.add_parser("report", help="Render maps and comparison plots for an evaluation")
        report.add_argument("--report", help="Evaluation CSV (default: reports/evaluation.csv in the run)")
        _add_common(report)

    def handle(self, *args, **options):
        try:
            config = load_config(options.get("config") or settings.ELASTOLAB_CONFIG)
            config = config.with_overrides(seed=options.get("seed"), output_dir=options.get("out"))
            handler = getattr(self, f"_handle_{options['stage']}")
            handler(config, options)
        except (ValidationError, FieldFormatError, FileNotFoundError) as e:
            logger.error(f"{options['stage']}: {e}")
            raise CommandError(str(e), returncode=EXIT_VALIDATION) from e
        except NumericalError as e:
            logger.error(f"{options['stage']}: numerical failure: {e}")
            raise CommandError(f"Numerical failure: {e}", returncode=EXIT_NUMERICAL) from e
        timings = get_performance_stats()
        if timings:
            logger.info(f"{options['stage']} timings: {timings}")

    def _handle_phantom(self, config: RunConfig, options):
        paths = pipeline.cmd_phantom(config, options.get("phantom_class"), options.get("count"))
        for path in paths:
            self.stdout.write(str(path))

    def _handle_simulate(self, config: RunConfig, options):
        root = pipeline.output_root(config)
        specs = options["specs"] or sorted(
            p for p in (root / "phantoms").glob("*.json") if not p.name.endswith(".mreg.json")
        )
        for u_path, mu_path in pipeline.cmd_simulate(config, specs):
            self.stdout.write(f"{u_path} {mu_path}")

    def _handle_dataset(self, config: RunConfig, options):
        root = pipeline.output_root(config)
        fields = [Path(p) for p in options["fields"]] or sorted((root / "fields").glob("*_u.mreg"))
        pairs = [(u, u.with_name(f"{pipeline.case_id(u)}_mu.mreg")) for u in fields]
        for split, path in pipeline.cmd_dataset(config, pairs).items():
            self.stdout.write(f"{split}: {path}")

    def _handle_train(self, config: RunConfig, options):
        path = pipeline.cmd_train(config, options.get("dataset"))
        self.stdout.write(self.style.SUCCESS(f"Model written to {path}"))

    def _handle_invert(self, config: RunConfig, options):
        fields = options["fields"] or self._default_inversion_fields(pipeline.output_root(config))
        summaries = pipeline.cmd_invert(config, options["method"], fields, options.get("checkpoint"))
        for s in summaries:
            self.stdout.write(
                f"{s.case} {s.method}: ROI mean {s.roi_mean / 1000:.3f} kPa "
                f"(std {s.roi_std / 1000:.3f} kPa) -> {s.path}"
            )

    @staticmethod
    def _default_inversion_fields(root: Path):
        manifest = root / "dataset" / "manifest.json"
        if manifest.exists():
            data = json.loads(manifest.read_text(encoding="utf-8"))
            test_cases = data["splits"].get("test", [])
            if test_cases:
                return [data["fields"][name][0] for name in test_cases]
        return sorted((root / "fields").glob("*_u.mreg"))

    def _handle_evaluate(self, config: RunConfig, options):
        path = pipeline.cmd_evaluate(config, options.get("cases") or None)
        self.stdout.write(self.style.SUCCESS(f"Report written to {path}"))

    def _handle_report(self, config: RunConfig, options):
        for path in pipeline.cmd_report(config, options.get("report")):
            self.stdout.write(str(path))
