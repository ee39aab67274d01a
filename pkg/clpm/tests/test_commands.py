import json
import os
import shutil
import tempfile
import unittest
from io import StringIO

import pandas as pd
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase

SLOW_TESTS = bool(os.environ.get("CLPM_SLOW_TESTS"))


class ClpmCommandTest(SimpleTestCase):
    """drives simulate -> fit -> eval -> score on a small block model"""

    @classmethod
    def setUpClass(cls):
        super(ClpmCommandTest, cls).setUpClass()
        cls.tmp = tempfile.mkdtemp(prefix="clpm-test-")
        cls.sim_dir = os.path.join(cls.tmp, "sim")
        cls.fit_dir = os.path.join(cls.tmp, "fit")
        cls.events = os.path.join(cls.sim_dir, "events.csv")
        cls.clpm("simulate", "--n", "8", "--seed", "1", "--output", cls.sim_dir)
        cls.clpm("fit", "--events", cls.events, "--K", "3", "--epochs", "5", "--log-every", "0", "--test-frac", "0.2",
                 "--output", cls.fit_dir)

    @classmethod
    def tearDownClass(cls):
        shutil.rmtree(cls.tmp, ignore_errors=True)
        super(ClpmCommandTest, cls).tearDownClass()

    @staticmethod
    def clpm(*args):
        out = StringIO()
        call_command("clpm", *args, stdout=out)
        return out.getvalue()

    def path(self, *parts):
        return os.path.join(self.tmp, *parts)

    def test_simulate_outputs(self):
        for name in ("events.csv", "labels.csv", "spec.json", "config.json"):
            self.assertTrue(os.path.exists(os.path.join(self.sim_dir, name)), name)
        labels = pd.read_csv(os.path.join(self.sim_dir, "labels.csv"))
        self.assertEqual(len(labels), 8 * 3)

    def test_simulate_is_reproducible(self):
        self.clpm("simulate", "--n", "8", "--seed", "1", "--output", self.path("again"))
        with open(self.events, "rb") as first, open(self.path("again", "events.csv"), "rb") as second:
            self.assertEqual(first.read(), second.read())

    def test_simulate_without_events(self):
        self.clpm("simulate", "--n", "6", "--intra-rate", "0", "--inter-rate", "0", "--output", self.path("empty"))
        with open(self.path("empty", "events.csv")) as fh:
            self.assertEqual(fh.read().strip(), "source,dest,timestamp")

    def test_fit_outputs(self):
        for name in ("model.json", "loss.csv", "embeddings.csv", "nodes.csv", "split.json", "config.json"):
            self.assertTrue(os.path.exists(os.path.join(self.fit_dir, name)), name)
        self.assertEqual(len(pd.read_csv(os.path.join(self.fit_dir, "loss.csv"))), 5)
        embeddings = pd.read_csv(os.path.join(self.fit_dir, "embeddings.csv"))
        self.assertEqual(len(embeddings), 8 * 4)
        self.assertEqual(list(embeddings.columns[:6]), ["node", "k", "eta", "mu_0", "mu_1", "sigma"])
        with open(os.path.join(self.fit_dir, "config.json")) as fh:
            config = json.load(fh)
        self.assertEqual((config["K"], config["epochs"], config["test_frac"]), (3, 5, 0.2))

    def test_fit_prints_dataset_summary(self):
        out = self.clpm("fit", "--events", self.events, "--K", "2", "--epochs", "1", "--log-every", "0",
                        "--output", self.path("fit-summary"))
        self.assertIn("dataset: 8 nodes", out)

    def test_config_file_and_flag_precedence(self):
        config = self.path("run.json")
        with open(config, "w") as fh:
            json.dump({"K": 2, "epochs": 2, "log_every": 0, "test_frac": 0.0}, fh)
        self.clpm("fit", "--config", config, "--events", self.events, "--epochs", "3", "--output", self.path("cfg"))
        with open(self.path("cfg", "model.json")) as fh:
            model = json.load(fh)
        self.assertEqual(model["hyper"]["K"], 2)
        self.assertEqual(model["hyper"]["epochs"], 3)
        self.assertEqual(len(pd.read_csv(self.path("cfg", "loss.csv"))), 3)
        with open(self.path("cfg", "split.json")) as fh:
            split = json.load(fh)
        self.assertEqual((split["test"], split["validation"]), ([], []))
        self.assertGreater(len(split["train"]), 0)

    def test_strict_deterministic_rerun(self):
        args = ("fit", "--events", self.events, "--K", "2", "--epochs", "3", "--log-every", "0", "--threads", "2",
                "--strict-deterministic")
        self.clpm(*args, "--output", self.path("det-a"))
        self.clpm(*args, "--output", self.path("det-b"))
        with open(self.path("det-a", "model.json")) as a, open(self.path("det-b", "model.json")) as b:
            first, second = json.load(a), json.load(b)
        first.pop("runtime_seconds")
        second.pop("runtime_seconds")
        self.assertEqual(first, second)
        self.assertEqual(first["hyper"]["threads"], 1)

    def test_eval_outputs(self):
        out_dir = self.path("eval")
        out = self.clpm("eval", "--model", os.path.join(self.fit_dir, "model.json"), "--events", self.events,
                        "--draws", "3", "--lsdm-iterations", "20", "--output", out_dir)
        for name in ("auc.json", "instances.csv", "uncertainty_nodes.csv", "uncertainty_edges.csv",
                     "rate_vs_uncertainty.csv", "uncertainty_over_time.csv", "config.json"):
            self.assertTrue(os.path.exists(os.path.join(out_dir, name)), name)
        with open(os.path.join(out_dir, "auc.json")) as fh:
            report = json.load(fh)
        self.assertEqual(report["K"], 3)
        self.assertEqual(report["dataset"], "events.csv")
        self.assertIn("train", report["auc"])
        self.assertEqual(set(report["auc"]["train"]), {"tgne", "tgne-predictive", "lsdm", "pa", "random"})
        self.assertIn("train AUC", out)
        trace = pd.read_csv(os.path.join(out_dir, "uncertainty_over_time.csv"))
        self.assertEqual(trace["k"].tolist(), [1, 2, 3])

    def test_eval_scorer_subset(self):
        out_dir = self.path("eval-subset")
        self.clpm("eval", "--model", self.fit_dir, "--events", self.events, "--scorers", "tgne,pa", "--draws", "2",
                  "--output", out_dir)
        with open(os.path.join(out_dir, "auc.json")) as fh:
            report = json.load(fh)
        self.assertEqual(set(report["auc"]["train"]), {"tgne", "pa"})

    def test_eval_without_held_out_pairs_scores_train_only(self):
        fit_dir = self.path("fit-whole")
        self.clpm("fit", "--events", self.events, "--K", "3", "--epochs", "2", "--log-every", "0", "--test-frac", "0",
                  "--output", fit_dir)
        self.clpm("eval", "--model", fit_dir, "--events", self.events, "--scorers", "tgne", "--draws", "2",
                  "--output", self.path("eval-whole"))
        with open(self.path("eval-whole", "auc.json")) as fh:
            report = json.load(fh)
        self.assertEqual(list(report["auc"]), ["train"])

    def test_eval_requires_a_recorded_split(self):
        fit_dir = self.path("fit-nosplit")
        self.clpm("fit", "--events", self.events, "--K", "2", "--epochs", "1", "--log-every", "0", "--test-frac", "0",
                  "--output", fit_dir)
        os.remove(os.path.join(fit_dir, "split.json"))
        with self.assertRaisesMessage(CommandError, "fitted without a recorded split"):
            self.clpm("eval", "--model", fit_dir, "--events", self.events, "--scorers", "tgne",
                      "--output", self.path("eval-nosplit"))
        self.clpm("eval", "--model", fit_dir, "--events", self.events, "--scorers", "tgne", "--draws", "2",
                  "--split", os.path.join(self.fit_dir, "split.json"), "--output", self.path("eval-given-split"))
        self.assertTrue(os.path.exists(self.path("eval-given-split", "auc.json")))

    def test_score_outputs(self):
        pairs = self.path("pairs.csv")
        pd.DataFrame({"source": ["0", "2"], "dest": ["1", "5"]}).to_csv(pairs, index=False)
        self.clpm("score", "--model", os.path.join(self.fit_dir, "model.json"), "--events", self.events,
                  "--pairs", pairs, "--output", self.path("score"))
        scores = pd.read_csv(self.path("score", "scores.csv"))
        self.assertEqual(list(scores.columns), ["source", "dest", "k", "score"])
        self.assertEqual(len(scores), 2 * 3)
        self.assertTrue((scores["score"] > 0).all())

    def test_score_rejects_unknown_nodes(self):
        pairs = self.path("bad-pairs.csv")
        pd.DataFrame({"source": ["0"], "dest": ["ghost"]}).to_csv(pairs, index=False)
        with self.assertRaises(CommandError):
            self.clpm("score", "--model", self.fit_dir, "--events", self.events, "--pairs", pairs,
                      "--output", self.path("bad-score"))

    def test_usage_errors(self):
        with self.assertRaises(CommandError):
            self.clpm("eval", "--events", self.events)
        with self.assertRaises(CommandError):
            self.clpm("fit", "--events", self.events, "--kind", "cosine")

    def test_runtime_errors(self):
        with self.assertRaises(CommandError):
            self.clpm("fit", "--events", self.path("missing.csv"), "--output", self.path("missing"))
        with self.assertRaises(CommandError):
            self.clpm("eval", "--model", self.path("nowhere"), "--events", self.events, "--output", self.path("nm"))
        bad = self.path("bad.json")
        with open(bad, "w") as fh:
            json.dump({"learning_rate": 1.0}, fh)
        with self.assertRaises(CommandError):
            self.clpm("fit", "--config", bad, "--events", self.events, "--output", self.path("bad-config"))

    @unittest.skipUnless(SLOW_TESTS, "set CLPM_SLOW_TESTS to run")
    def test_default_fit_runs_every_epoch(self):
        out_dir = self.path("sbm-default")
        self.clpm("simulate", "--output", out_dir)
        self.clpm("fit", "--events", os.path.join(out_dir, "events.csv"), "--log-every", "0",
                  "--output", os.path.join(out_dir, "fit"))
        self.assertEqual(len(pd.read_csv(os.path.join(out_dir, "fit", "loss.csv"))), 500)
        self.assertEqual(len(pd.read_csv(os.path.join(out_dir, "fit", "embeddings.csv"))), 60 * 16)
