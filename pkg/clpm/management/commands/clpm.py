import json
import os
import pathlib
from argparse import RawTextHelpFormatter

import numpy as np
import pandas as pd
from django.core.management.base import BaseCommand, CommandError
from django.core.serializers.json import DjangoJSONEncoder

from clpm.conf import build_run_config, write_config
from clpm.evaluation import (LsdmOptions, ReconstructionBenchmark, edge_uncertainty_frame, edge_uncertainties,
                             node_uncertainty_frame, rate_vs_uncertainty_table, regression_slope, tgne_scores,
                             uncertainty_over_time)
from clpm.events import EdgeSplit, dataset_stats, read_events, split_edges, write_nodes
from clpm.exceptions import ClpmError, DataError
from clpm.inference import fit, load_model, save_model
from clpm.simulate import SbmSpec, sbm_generate, write_simulation


class Command(BaseCommand):
    help = """
    usage: ./manage.py clpm [simulate|fit|eval|score] [options]
    -----------------------------------------------------------
    example: ./manage.py clpm simulate --seed 7 --output runs/sbm
    example: ./manage.py clpm fit --events runs/sbm/events.csv --K 15 --tau 1.0 --output runs/fit
    example: ./manage.py clpm eval --model runs/fit/model.json --events runs/sbm/events.csv --output runs/eval
    example: ./manage.py clpm score --model runs/fit/model.json --events runs/sbm/events.csv --pairs pairs.csv

    actions
    --------
    simulate - writes a stochastic block model event history (events.csv, labels.csv)
    fit - fits the latent position model (model.json, loss.csv, embeddings.csv)
    eval - reconstruction AUC of every scorer plus the uncertainty tables
    score - expected number of events of the given pairs in every interval (scores.csv)

    Every action echoes its merged configuration to config.json in the output directory;
    --config run.json supplies any option and explicit flags override it.
    """

    def create_parser(self, *args, **kwargs):
        parser = super(Command, self).create_parser(*args, **kwargs)
        parser.formatter_class = RawTextHelpFormatter
        return parser

    def add_arguments(self, parser):
        actions = parser.add_subparsers(dest='action', required=True)

        simulate = actions.add_parser('simulate', help='generate a synthetic event history')
        self.add_common(simulate)
        simulate.add_argument('--n', type=int)
        simulate.add_argument('--intra-rate', dest='intra_rate', type=float)
        simulate.add_argument('--inter-rate', dest='inter_rate', type=float)

        fit_parser = actions.add_parser('fit', help='fit the model to an event history')
        self.add_common(fit_parser)
        self.add_data(fit_parser, required=True)
        fit_parser.add_argument('--d', type=int)
        fit_parser.add_argument('--K', type=int)
        fit_parser.add_argument('--tau', type=float)
        fit_parser.add_argument('--tau0', type=float)
        fit_parser.add_argument('--epochs', type=int)
        fit_parser.add_argument('--lr-phi', dest='lr_phi', type=float)
        fit_parser.add_argument('--lr-beta', dest='lr_beta', type=float)
        fit_parser.add_argument('--riemann-R', dest='riemann_R', type=int)
        fit_parser.add_argument('--kind', choices=['euclidean', 'dot-product'])
        fit_parser.add_argument('--negatives', type=int)
        fit_parser.add_argument('--batch', type=int)
        fit_parser.add_argument('--negatives-per-interval', dest='negatives_per_interval', action='store_true',
                                default=None)
        fit_parser.add_argument('--elbo-samples', dest='elbo_samples', type=int)
        fit_parser.add_argument('--log-every', dest='log_every', type=int)

        eval_parser = actions.add_parser('eval', help='reconstruction benchmark and uncertainty tables')
        self.add_common(eval_parser)
        self.add_data(eval_parser, required=True)
        eval_parser.add_argument('--model', required=True)
        eval_parser.add_argument('--split', help='split.json written by fit (default: next to the model)')
        eval_parser.add_argument('--scorers', help='comma separated subset of tgne,tgne-predictive,lsdm,pa,random')
        eval_parser.add_argument('--draws', type=int, help='posterior draws B')
        eval_parser.add_argument('--track-node', dest='track_node')
        eval_parser.add_argument('--lsdm-iterations', dest='lsdm_iterations', type=int)

        score = actions.add_parser('score', help='score node pairs with a fitted model')
        self.add_common(score)
        score.add_argument('--model', required=True)
        score.add_argument('--events', required=True)
        score.add_argument('--pairs', required=True)
        score.add_argument('--scorer', choices=['tgne', 'tgne-predictive'])
        score.add_argument('--draws', type=int)

    @staticmethod
    def add_common(parser):
        parser.add_argument('--config', help='JSON file with any of the options below')
        parser.add_argument('--output')
        parser.add_argument('--seed', type=int)
        parser.add_argument('--threads', type=int)
        parser.add_argument('--strict-deterministic', dest='strict_deterministic', action='store_true',
                            default=None)

    @staticmethod
    def add_data(parser, required=False):
        parser.add_argument('--events', required=required)
        parser.add_argument('--directed', action='store_true', default=None)
        parser.add_argument('--test-frac', dest='test_frac', type=float)
        parser.add_argument('--val-frac', dest='val_frac', type=float)

    def handle(self, *args, **options):
        action = options.pop('action')
        config_path = options.pop('config', None)
        flags = {k: v for k, v in options.items() if k in RUN_FLAGS}
        try:
            run = build_run_config(config_path, **flags)
            output = pathlib.Path(run.output)
            output.mkdir(parents=True, exist_ok=True)
            write_config(run, output)
            getattr(self, f"run_{action}")(run, output)
        except ClpmError as ce:
            raise CommandError(str(ce), returncode=1)

    def run_simulate(self, run, output):
        spec = SbmSpec.default(n=run.n, intra_rate=run.intra_rate, inter_rate=run.inter_rate, seed=run.seed)
        sim = sbm_generate(spec)
        write_simulation(sim, output)
        self.stdout.write(self.style.SUCCESS(f"Simulated {len(sim.events)} events on {spec.n} nodes to {output}"))

    def run_fit(self, run, output):
        ev = read_events(run.events, directed=run.directed)
        stats = dataset_stats(ev)
        self.stdout.write(f"dataset: {stats['nodes']} nodes, {stats['unique_edges']} unique edges, "
                          f"{stats['events']} events")
        if run.test_frac or run.val_frac:
            split = split_edges(ev, run.test_frac, run.val_frac, run.seed)
        else:
            split = EdgeSplit(train=ev.pair_set(), validation=frozenset(), test=frozenset(), seed=run.seed)
        # recorded even when nothing is held out; eval refuses to run without it
        write_split(split, ev.labels, output / "split.json")
        fm = fit(ev, run.to_hyperparams(), split if split.excluded else None)
        save_model(fm, output, ev)
        write_nodes(ev, output / "nodes.csv")
        final = f"; final loss {fm.loss_trace[-1]:.4f}" if fm.loss_trace.size else ""
        self.stdout.write(self.style.SUCCESS(f"Fitted {run.epochs} epochs in {fm.runtime_seconds:.1f}s{final}; "
                                             f"model written to {output}"))

    def run_eval(self, run, output):
        fm = load_model(run.model)
        ev = read_events(run.events, directed=fm.directed, time_range=(fm.t_min, fm.t_max), labels=fm.labels)
        split = self.load_split(run, fm, ev)
        bench = ReconstructionBenchmark(fm, ev, split, B=run.draws, seed=run.seed,
                                        lsdm_options=LsdmOptions(iterations=run.lsdm_iterations, seed=run.seed))
        results, instances = bench.run(run.scorers)
        instances.to_csv(output / "instances.csv", index=False, float_format="%.17g")

        node_uncertainty_frame(fm, bench.counts).to_csv(output / "uncertainty_nodes.csv", index=False,
                                                       float_format="%.17g")
        edges = edge_uncertainty_frame(fm, bench.counts, split.train, B=run.draws, seed=run.seed)
        edges.to_csv(output / "uncertainty_edges.csv", index=False, float_format="%.17g")
        slope = None
        if edges["N"].nunique() >= 2:
            slope = regression_slope(edges["N"], edges["lambda_std"])
        rate_vs_uncertainty_table(ev, fm, B=run.draws, seed=run.seed, counts=bench.counts).to_csv(
            output / "rate_vs_uncertainty.csv", index=False, float_format="%.17g")

        node = fm.label_map().get(run.track_node)
        if node is None:
            raise DataError(f"tracked node {run.track_node!r} is not a node of the model")
        trace = uncertainty_over_time(fm.state, node)
        pd.DataFrame({"node": run.track_node, "k": [k for k, _ in trace], "u": [u for _, u in trace]}).to_csv(
            output / "uncertainty_over_time.csv", index=False, float_format="%.17g")

        report = {"dataset": os.path.basename(run.events), "K": fm.part.K, "auc": results,
                  "uncertainty_slope": slope}
        with open(output / "auc.json", "w", encoding="utf-8") as fh:
            json.dump(report, fh, cls=DjangoJSONEncoder, indent=1)
        for name, aucs in results.items():
            line = ", ".join(f"{scorer}={value:.4f}" for scorer, value in aucs.items())
            self.stdout.write(self.style.SUCCESS(f"{name} AUC: {line}"))

    @staticmethod
    def load_split(run, fm, ev):
        model_dir = pathlib.Path(run.model)
        if not model_dir.is_dir():
            model_dir = model_dir.parent
        path = pathlib.Path(run.split) if run.split else model_dir / "split.json"
        if not path.exists():
            raise DataError(f"no split file {path}: the model was fitted without a recorded split, pass --split")
        return read_split(path, fm.label_map(), run.seed)

    def run_score(self, run, output):
        fm = load_model(run.model)
        # the history must live on the model's nodes and time scale
        read_events(run.events, directed=fm.directed, time_range=(fm.t_min, fm.t_max), labels=fm.labels)
        ids = fm.label_map()
        try:
            pairs = pd.read_csv(run.pairs, dtype=str)
        except OSError as ose:
            raise DataError(f"cannot read pairs {run.pairs}: {ose.strerror}")
        if list(pairs.columns[:2]) != ["source", "dest"]:
            raise DataError(f"{run.pairs} must have the columns source,dest")
        unknown = sorted(set(pairs["source"]).union(pairs["dest"]) - set(ids))
        if unknown:
            raise DataError(f"unknown node label(s) in {run.pairs}: {', '.join(unknown)}")
        if (pairs["source"] == pairs["dest"]).any():
            raise DataError(f"{run.pairs} contains a self pair")
        K = fm.part.K
        i = np.repeat(pairs["source"].map(ids).to_numpy(dtype=np.int64), K)
        j = np.repeat(pairs["dest"].map(ids).to_numpy(dtype=np.int64), K)
        k = np.tile(np.arange(1, K + 1), len(pairs))
        if run.scorer == "tgne":
            scores = tgne_scores(fm, i, j, k)
        else:
            scores = edge_uncertainties(fm, i, j, k, B=run.draws, seed=run.seed)[0]
        frame = pd.DataFrame({"source": np.repeat(pairs["source"].to_numpy(), K),
                              "dest": np.repeat(pairs["dest"].to_numpy(), K), "k": k, "score": scores})
        frame.to_csv(output / "scores.csv", index=False, float_format="%.17g")
        self.stdout.write(self.style.SUCCESS(f"Scored {len(pairs)} pairs over {K} intervals to {output}"))


RUN_FLAGS = {
    'output', 'seed', 'threads', 'strict_deterministic', 'n', 'intra_rate', 'inter_rate', 'events', 'directed',
    'test_frac', 'val_frac', 'd', 'K', 'tau', 'tau0', 'epochs', 'lr_phi', 'lr_beta', 'riemann_R', 'kind', 'negatives',
    'batch', 'negatives_per_interval', 'elbo_samples', 'log_every', 'model', 'scorers', 'draws', 'track_node',
    'lsdm_iterations', 'split', 'pairs', 'scorer',
}


def write_split(split, labels, path):
    as_labels = lambda pairs: sorted([labels[a], labels[b]] for a, b in pairs)  # noqa: E731
    doc = {"seed": split.seed, "test_frac": split.test_frac, "val_frac": split.val_frac,
           "train": as_labels(split.train), "validation": as_labels(split.validation), "test": as_labels(split.test)}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, cls=DjangoJSONEncoder, indent=1)


def read_split(path, ids, seed):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        as_ids = lambda pairs: frozenset((ids[a], ids[b]) for a, b in pairs)  # noqa: E731
        return EdgeSplit(train=as_ids(doc["train"]), validation=as_ids(doc["validation"]), test=as_ids(doc["test"]),
                         seed=doc.get("seed", seed), test_frac=doc.get("test_frac", 0.0),
                         val_frac=doc.get("val_frac", 0.0))
    except (OSError, ValueError, KeyError) as e:
        raise DataError(f"cannot read split {path}: {e}")
