"""Resumable run pipeline: train-backbone, reconfigure, distill, eval, ood, report.

Each stage reads the artifacts of earlier stages from the run directory, so a
stage can be rerun (or resumed) in a fresh process with identical results.
Timing information goes to ``log.txt`` and ``timing.json`` only, which keeps
every other artifact byte-identical across reruns of the same config.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import calibrate as cal
from .backbone import Backbone, GP_MODES, backbone_forward, config_dict, init_backbone, train_backbone
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, config_hash, parse_config, snapshot
from .data import Dataset, gen_data, shifted_blobs
from .distill import distill_train, factor_mismatch, vlb_gap
from .errors import ContractError, MissingArtifactError
from .kernelnet import init_kernel, load_kernel, save_kernel
from .pathify import layer_correlations, path_logits, repartition, save_trace, simulate_path
from . import tensor as tn

STAGES = ("train-backbone", "reconfigure", "distill", "eval", "ood", "report")
OUTPUTS = {"train-backbone": "backbone.ckpt", "reconfigure": "path.json",
           "distill": "kernel.ckpt", "eval": "calibration_report.json",
           "ood": "ood_report.json", "report": "summary.json"}


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


@dataclass
class Run:
    config: RunConfig
    out: Path

    def __post_init__(self):
        self.out = Path(self.out)
        self.hash = config_hash(self.config)

    # -- io helpers ------------------------------------------------------------
    def file(self, name: str) -> Path:
        return self.out / name

    def log(self, msg: str) -> None:
        with open(self.file("log.txt"), "a") as fh:
            fh.write(msg + "\n")

    def write_json(self, name: str, obj: dict) -> None:
        obj = dict(obj, config_hash=self.hash, seed=self.config.seed)
        tmp = self.file(name + ".tmp")
        with open(tmp, "w") as fh:
            json.dump(_jsonable(obj), fh, indent=2, sort_keys=True)
            fh.write("\n")
        tmp.replace(self.file(name))

    def read_json(self, name: str) -> dict:
        self.require(name)
        with open(self.file(name)) as fh:
            return json.load(fh)

    def require(self, name: str) -> Path:
        p = self.file(name)
        if not p.exists():
            raise MissingArtifactError(f"{p} not found; run the stage that produces it first")
        return p

    def record_timing(self, stage: str, seconds: float) -> None:
        path = self.file("timing.json")
        timing = json.loads(path.read_text()) if path.exists() else {}
        timing[stage] = seconds
        path.write_text(json.dumps(timing, indent=2, sort_keys=True) + "\n")

    # -- shared inputs --------------------------------------------------------------
    def dataset(self) -> Dataset:
        c = self.config
        layout = {"toy-vision": "grid", "tabular": "tabular", "toy-text": None}[c.task]
        return gen_data(c.data_kind, c.data_n, c.seed, layout=layout)

    def backbone(self) -> Backbone:
        arrays, header = load_checkpoint(self.require("backbone.ckpt"))
        self._check_hash(header, "backbone.ckpt")
        model = init_backbone(self.config.backbone_config())
        model.load_arrays(arrays)
        return model

    def kernel(self):
        kp, header = load_kernel(self.require("kernel.ckpt"))
        self._check_hash(header, "kernel.ckpt")
        return kp

    def _check_hash(self, header: dict, name: str) -> None:
        if header.get("config_hash") != self.hash:
            raise ContractError(f"{name} was produced by config {header.get('config_hash')}, "
                                f"current config is {self.hash}")

    def init(self) -> None:
        self.out.mkdir(parents=True, exist_ok=True)
        snap = self.file("config.snapshot")
        text = snapshot(self.config)
        if snap.exists() and snap.read_text() != text:
            old = parse_config(snap.read_text())
            if config_hash(old) != self.hash:
                self.log(f"config changed: {config_hash(old)} -> {self.hash}")
        snap.write_text(text)


# -- stages -----------------------------------------------------------------------------
def stage_train_backbone(run: Run) -> None:
    c = run.config
    model = init_backbone(c.backbone_config())
    train_backbone(model, run.dataset(), c.train_config(), log=run.log)
    save_checkpoint(run.file("backbone.ckpt"), model.state_arrays(), seed=c.seed,
                    config_hash=run.hash, sections={"backbone": config_dict(c.backbone_config())})


def stage_reconfigure(run: Run) -> None:
    model = run.backbone()
    path = repartition(model)
    X, _ = run.dataset().split("test")
    with tn.no_grad():
        direct = backbone_forward(model, X, noise=False)[0].data
    fidelity = float(np.max(np.abs(path_logits(path, X) - direct)))
    stochastic = any(b["mode"] in GP_MODES for b in model.blocks)
    trace = simulate_path(path, path.embed(X[:8]), noise=stochastic, seed=run.config.seed)
    save_trace(trace, run.file("path_trace.ckpt"), config_hash=run.hash)
    run.write_json("path.json", {
        "T": path.T, "modes": [b["mode"] for b in model.blocks], "stochastic": stochastic,
        "fidelity_max_abs": fidelity,
        "layer_correlation_noise_off": layer_correlations(path, X, noise=False),
        "layer_correlation_noise_on": layer_correlations(path, X, noise=True, seed=run.config.seed),
        "trace_file": "path_trace.ckpt"})


def stage_distill(run: Run) -> None:
    c = run.config
    run.require("path.json")
    path = repartition(run.backbone())
    kp = init_kernel(c.kernel_config())
    kp, report = distill_train(path, kp, run.dataset(), c.distill_config(), log=run.log)
    X, _ = run.dataset().split("val")
    report.factor_mismatch = factor_mismatch(path, kp, path.embed(X))
    save_kernel(kp, run.file("kernel.ckpt"), seed=c.seed, config_hash=run.hash)
    run.record_timing("distill_wall_clock", report.wall_clock)
    run.write_json("distill_report.json", report.to_dict(include_timing=False))


def _predictions(run: Run, X, y):
    model = run.backbone()
    path = repartition(model)
    kp = run.kernel()
    c = run.config
    pb = cal.predict_calibrated(model, X, y, c.eval_n_draws, c.seed)
    pk = cal.predict_calibrated((path, kp), X, y, c.eval_n_draws, c.seed)
    return model, path, kp, pb, pk


def stage_eval(run: Run, dump: str | Path | None = None) -> None:
    c = run.config
    X, y = run.dataset().split("test")
    model, path, kp, pb, pk = _predictions(run, X, y)
    rb = cal.calibration_report(pb, c.eval_bins)
    rk = cal.calibration_report(pk, c.eval_bins)
    pk1 = cal.predict_calibrated((path, kp), X, y, 1, c.seed)
    vlb = vlb_gap(path, kp, path.embed(X[:1])[0], mc_samples=c.eval_vlb_samples, seed=c.seed)
    if dump is not None:
        dump = Path(dump)
        dump.mkdir(parents=True, exist_ok=True)
        cal.dump_predictions(pb, dump / "predictions_backbone.csv")
        cal.dump_predictions(pk, dump / "predictions_distilled.csv")
    run.write_json("calibration_report.json", {
        "n_draws": c.eval_n_draws, "backbone": rb.to_dict(), "distilled": rk.to_dict(),
        "delta": {"acc": rk.acc - rb.acc, "ece": rk.ece - rb.ece, "nll": rk.nll - rb.nll,
                  "brier": rk.brier - rb.brier},
        "diagnostic_ece_single_draw": cal.ece(pk1, c.eval_bins),
        "parameters": {"backbone": model.n_parameters(), "kernel": kp.n_parameters()},
        "vlb": vlb.to_dict()})


def stage_ood(run: Run) -> None:
    c = run.config
    if c.task == "toy-text":
        raise ContractError("the shifted-blobs OOD set is only defined for point-cloud tasks")
    X, y = run.dataset().split("test")
    layout = "grid" if c.task == "toy-vision" else "tabular"
    X_ood = shifted_blobs(c.data_ood_n, c.seed, layout=layout)
    _, _, _, pb, pk = _predictions(run, X, y)
    dummy = np.zeros(len(X_ood), dtype=np.int64)
    _, _, _, ob, ok = _predictions(run, X_ood, dummy)
    out = {}
    for name, (pin, pout) in {"backbone": (pb, ob), "distilled": (pk, ok)}.items():
        out[name] = {m: cal.ood_eval(pin, pout, m).to_dict() for m in ("msp", "entropy")}
    run.write_json("ood_report.json", {"method": c.ood_method, "n_in": len(X),
                                       "n_out": len(X_ood), "scores": out})


def stage_report(run: Run) -> None:
    calib = run.read_json("calibration_report.json")
    dist = run.read_json("distill_report.json")
    path = run.read_json("path.json")
    ood = run.read_json("ood_report.json") if run.file("ood_report.json").exists() else None
    summary = {
        "backbone": cal.CalibrationReport(**calib["backbone"]).rendered(),
        "distilled": cal.CalibrationReport(**calib["distilled"]).rendered(),
        "parameters": calib["parameters"],
        "kernel_smaller": calib["parameters"]["kernel"] < calib["parameters"]["backbone"],
        "loss_weights": dist["weights"],
        "final_losses": dist["epochs"][-1] if dist["epochs"] else None,
        "layer_correlation_noise_on": path["layer_correlation_noise_on"],
        "fidelity_max_abs": path["fidelity_max_abs"],
    }
    if ood is not None:
        summary["ood"] = {k: {m: v[m]["auroc"] for m in v} for k, v in ood["scores"].items()}
    run.write_json("summary.json", summary)
    cal.plot_report(cal.CalibrationReport(**calib["distilled"]), run.file("calibration.svg"))


STAGE_FUNCS = {"train-backbone": stage_train_backbone, "reconfigure": stage_reconfigure,
               "distill": stage_distill, "eval": stage_eval, "ood": stage_ood,
               "report": stage_report}


def run_stage(run: Run, stage: str, resume: bool = False, **kwargs) -> bool:
    """Run one stage; with ``resume`` a stage whose output exists is skipped."""
    if resume and run.file(OUTPUTS[stage]).exists() and not kwargs.get("dump"):
        run.log(f"{stage}: skipped, {OUTPUTS[stage]} present")
        return False
    t0 = time.perf_counter()
    run.log(f"{stage}: start (config {run.hash}, seed {run.config.seed})")
    try:
        STAGE_FUNCS[stage](run, **kwargs)
    except MissingArtifactError:
        raise
    except Exception as exc:
        run.log(f"{stage}: FAILED {type(exc).__name__}: {exc}")
        raise StageError(stage, exc) from exc
    dt = time.perf_counter() - t0
    run.record_timing(stage, dt)
    run.log(f"{stage}: done in {dt:.1f}s")
    return True


def run_pipeline(config: RunConfig, out, resume: bool = False, ood: bool = True,
                 stages=STAGES) -> Run:
    run = Run(config, out)
    run.init()
    for stage in stages:
        if stage == "ood" and not ood:
            continue
        run_stage(run, stage, resume=resume)
    return run
