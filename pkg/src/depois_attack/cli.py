"""Command line entry point.

::

    depois-attack train-defense --config run.json
    depois-attack distill       --config run.json
    depois-attack attack-eval   --config run.json [--strict]
    depois-attack report        --config run.json

All artifacts go under ``<out>/{defense,shadow,eval}``; each stage reads
only what earlier stages wrote to disk.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .attacks import AttackMode
from .config import RunConfig
from .data import split_trusted
from .defense import DefenseBundle, accuracy, augment_synthetic, train_classifier, train_wgan_critic
from .distill import TeacherOracle, build_shadow_bundle, distill_classifier, distill_critic
from .errors import ConfigError, DepoisError, GateFailure, TrainingError
from .gates import evaluate_gates
from .metrics import clean_accuracy, read_csv, run_sweep, write_csv
from .report import render

log = logging.getLogger("depois_attack")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(directory: Path, cfg: RunConfig, stage: str, extra: dict) -> Path:
    files = sorted(p for p in directory.rglob("*") if p.is_file() and p.name != "manifest.json")
    manifest = {
        "stage": stage,
        "config_sha256": cfg.digest(),
        "config": cfg.reproducible(),
        "seed": cfg.seed,
        "versions": {"depois_attack": __version__, "numpy": np.__version__, "python": platform.python_version()},
        "outputs": {str(p.relative_to(directory)): _sha256(p) for p in files},
        **extra,
    }
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _dump(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_train_defense(cfg: RunConfig) -> Path:
    train, test = cfg.datasets()
    s_c, remainder = split_trusted(train, cfg.split())
    log.info("train %d / eval %d / trusted %d", len(train), len(test), len(s_c))

    classifier, clf_report = train_classifier(train, cfg.classifier(), cfg.stage_seed(1), test)
    log.info("classifier train acc %.4f test acc %.4f", clf_report["train_accuracy"], clf_report["test_accuracy"])

    aug = cfg.augment
    s_aug = augment_synthetic(s_c, aug["per_class"], cfg.wgan(epochs=aug["epochs"]), cfg.stage_seed(2))
    wcfg = cfg.wgan()
    generator, critic, critic_report = train_wgan_critic(
        s_aug, classifier, wcfg, cfg.stage_seed(3), holdout=remainder, strict=cfg.strict
    )
    log.info("critic separation %.4f", critic_report["separation"])

    meta = {"seed": cfg.seed, "lipschitz_mode": wcfg.lipschitz_mode}
    bundle = DefenseBundle.calibrate(classifier, critic, s_c, cfg.q, generator=generator, meta=meta)
    trusted_accept = float(np.mean(bundle.predict(s_c.images) != -1))
    out = cfg.out / "defense"
    bundle.save(out)
    report = {
        "classifier": clf_report,
        "critic": critic_report,
        "theta": bundle.theta,
        "q": bundle.q,
        "n_trusted": len(s_c),
        "n_aug": len(s_aug),
        "n_generated": int(s_aug.generated.sum()),
        "trusted_acceptance": trusted_accept,
    }
    _dump(out / "train_report.json", report)
    write_manifest(
        out,
        cfg,
        "train-defense",
        {"q": bundle.q, "theta": bundle.theta, "lipschitz_mode": wcfg.lipschitz_mode,
         "seeds": {"classifier": cfg.stage_seed(1), "augment": cfg.stage_seed(2), "wgan": cfg.stage_seed(3)},
         "split_seed": cfg.split().seed},
    )
    return out


def cmd_distill(cfg: RunConfig) -> Path:
    bundle = DefenseBundle.load(cfg.out / "defense")
    train, test = cfg.datasets()
    _, transfer = split_trusted(train, cfg.split())
    dcfg = cfg.distill()
    oracle = TeacherOracle.from_bundle(bundle, dcfg.query_budget)
    del bundle  # from here on only the oracle is used

    student_clf, clf_report = distill_classifier(oracle, dcfg, transfer, cfg.stage_seed(11), holdout=test)
    student_critic, critic_report = distill_critic(
        oracle, dcfg, transfer, student_clf, cfg.stage_seed(12), holdout=test
    )
    shadow = build_shadow_bundle(student_critic, student_clf, transfer, cfg.q)
    out = cfg.out / "shadow"
    shadow.save(out)
    report = {
        "alpha": dcfg.alpha,
        "temperature": dcfg.temperature,
        "query_count": oracle.queries,
        "query_budget": dcfg.query_budget,
        "classifier": clf_report,
        "critic": critic_report,
        "agreement": clf_report.get("agreement"),
        "pearson": critic_report.get("pearson"),
        "truncated": clf_report["truncated"] or critic_report["truncated"],
    }
    if report["truncated"]:
        log.warning("oracle query budget truncated distillation")
    _dump(out / "distill_report.json", report)
    write_manifest(out, cfg, "distill", {"seeds": {"classifier": cfg.stage_seed(11), "critic": cfg.stage_seed(12)}})
    return out


def cmd_attack_eval(cfg: RunConfig) -> tuple[Path, bool]:
    bundle = DefenseBundle.load(cfg.out / "defense")
    acfg = cfg.attack
    access = list(acfg["access"])
    shadow = None
    if "black" in access:
        if not (cfg.out / "shadow" / "calibration.json").exists():
            raise ConfigError(f"black-box evaluation needs a shadow bundle; run 'distill' first ({cfg.out / 'shadow'})")
        shadow = DefenseBundle.load(cfg.out / "shadow")
    _, test = cfg.datasets()
    records = run_sweep(
        bundle, shadow, test, acfg["epsilons"], [AttackMode(m) for m in acfg["modes"]], cfg.seed, access
    )
    out = cfg.out / "eval"
    write_csv(records, out / "sweep.csv")
    render(records, out, acfg["table_epsilon"])
    verdicts = bundle.predict(test.images)
    clean = {
        "classifier_accuracy": accuracy(bundle.classifier, test),
        "acceptance": float(np.mean(verdicts != -1)),
        "clean_set_accuracy": clean_accuracy(verdicts, test.labels),
    }
    gates = evaluate_gates(records, clean["clean_set_accuracy"])
    summary = {
        "clean": clean,
        "gates": [{"name": g.name, "passed": g.passed, "detail": g.detail} for g in gates],
    }
    _dump(out / "summary.json", summary)
    write_manifest(out, cfg, "attack-eval", {"n_records": len(records)})
    for g in gates:
        log.info("%s %s: %s", "PASS" if g.passed else "FAIL", g.name, g.detail)
    return out, all(g.passed for g in gates)


def cmd_report(cfg: RunConfig) -> Path:
    out = cfg.out / "eval"
    records = read_csv(out / "sweep.csv")
    render(records, out, cfg.attack["table_epsilon"])
    print((out / "table.md").read_text(), end="")
    return out


COMMANDS = {
    "train-defense": cmd_train_defense,
    "distill": cmd_distill,
    "attack-eval": cmd_attack_eval,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="depois-attack", description="Train, steal and attack a De-Pois style defence.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--out", help="output directory (overrides config 'out')")
        p.add_argument("--seed", type=int, help="master seed (overrides config 'seed')")
        p.add_argument("--strict", action="store_true", help="turn sanity warnings and failed gates into nonzero exits")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = RunConfig.load(args.config).with_overrides(args.seed, args.out, args.strict or None)
        with warnings.catch_warnings():
            if cfg.strict:
                warnings.simplefilter("error", RuntimeWarning)
            result = COMMANDS[args.command](cfg)
    except RuntimeWarning as exc:
        print(f"error: {exc}", file=sys.stderr)
        return TrainingError.exit_code
    except DepoisError as exc:
        print(f"error [{args.command}]: {exc}", file=sys.stderr)
        return exc.exit_code
    if args.command == "attack-eval":
        out, passed = result
        if cfg.strict and not passed:
            print("error: acceptance gates failed (see eval/summary.json)", file=sys.stderr)
            return GateFailure.exit_code
    else:
        out = result
    print(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
