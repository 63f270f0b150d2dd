import math
import tempfile
from pathlib import Path

from django.conf import settings
from django.test import SimpleTestCase

from elastography.config import RunConfig, load_config
from elastography.exceptions import ValidationError


class LoadConfigTests(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def _write(self, text):
        path = self.dir / "run.toml"
        path.write_text(text)
        return path

    def test_defaults(self):
        config = load_config()
        self.assertEqual(config.seed, 0)
        self.assertEqual(config.solver.frequency, 60.0)
        self.assertEqual(config.solver.snr_db, math.inf)
        self.assertEqual(config.patch.split, (0.8, 0.1, 0.1))
        self.assertEqual(config.train.lr, 3e-4)
        self.assertEqual(config.mmdi.laplacian_scales, (1, 2))

    def test_sections_override_defaults(self):
        config = load_config(self._write(
            'seed = 7\n'
            'output_dir = "runs/desk"\n'
            '[solver]\nfrequency = 50.0\nsnr_db = 30.0\n'
            '[mmdi]\ndirections = [0.0, 90.0, 180.0, 270.0]\nlaplacian_scales = [1]\n'
            '[train]\nepochs = 4\nbase_channels = 8\n'
        ))
        self.assertEqual(config.seed, 7)
        self.assertEqual(config.output_dir, "runs/desk")
        self.assertEqual(config.solver.frequency, 50.0)
        self.assertEqual(config.train.epochs, 4)
        self.assertEqual(config.train.seed, 7)
        self.assertEqual(config.mmdi.laplacian_scales, (1,))
        self.assertEqual(config.mmdi.inversion(config.solver).frequency, 50.0)
        self.assertEqual(config.mmdi.filter_bank().directions, (0.0, 90.0, 180.0, 270.0))

    def test_infinite_snr_from_toml(self):
        config = load_config(self._write("[solver]\nsnr_db = inf\n"))
        self.assertEqual(config.solver.snr_db, math.inf)

    def test_unknown_keys_rejected(self):
        for text in ("colour = 'red'\n", "[solver]\nfrequncy = 50.0\n", "[viewer]\nzoom = 2\n", "[train]\nseed = 3\n"):
            with self.subTest(text=text), self.assertRaises(ValidationError):
                load_config(self._write(text))

    def test_bad_values_rejected(self):
        for text in (
            "seed = -1\n",
            "[solver]\nfrequency = 'fast'\n",
            "[patch]\nsplit = [0.5, 0.3, 0.3]\n",
            "[phantom]\nphantom_class = 'Striped'\n",
            "[mmdi]\nlow_cut = 200.0\n",
        ):
            with self.subTest(text=text), self.assertRaises(ValidationError):
                load_config(self._write(text))

    def test_missing_and_malformed_files(self):
        with self.assertRaises(ValidationError):
            load_config(self.dir / "absent.toml")
        with self.assertRaises(ValidationError):
            load_config(self._write("seed = = 3\n"))


class RunConfigTests(SimpleTestCase):
    def test_hash_is_stable_and_sensitive(self):
        a = RunConfig.from_dict({"seed": 1, "solver": {"frequency": 60.0}})
        b = RunConfig.from_dict({"seed": 1})
        self.assertEqual(a.config_hash(), b.config_hash())
        self.assertNotEqual(a.config_hash(), a.with_overrides(seed=2).config_hash())
        self.assertEqual(len(a.config_hash()), 64)

    def test_overrides(self):
        config = RunConfig().with_overrides(seed=9, output_dir="/tmp/run")
        self.assertEqual(config.seed, 9)
        self.assertEqual(config.train.seed, 9)
        self.assertEqual(config.output_dir, "/tmp/run")
        self.assertEqual(config.with_overrides().seed, 9)

    def test_dict_form_omits_training_seed(self):
        data = RunConfig(seed=4).to_dict()
        self.assertNotIn("seed", data["train"])
        self.assertEqual(data["seed"], 4)


class ProjectSettingsTests(SimpleTestCase):
    def test_only_cli_and_cache_settings(self):
        for name in ("SECRET_KEY", "ALLOWED_HOSTS", "DATABASES", "DEFAULT_AUTO_FIELD"):
            with self.subTest(setting=name):
                self.assertFalse(settings.is_overridden(name))
        self.assertEqual(settings.INSTALLED_APPS, ["elastography"])
        self.assertIn("locmem", settings.CACHES["default"]["BACKEND"])
