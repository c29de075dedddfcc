"""Study stages: gen, train, diagnose, window, plot.

Each stage reads the artifacts of the previous one from the output
directory, so stages can be rerun independently.  Layout::

    out/data/{train,diagnostic}.gwds, out/data/manifest.json
    out/checkpoints/<kind>.gwck, out/loss.csv, out/train_status.json
    out/{envelope,noise,tau,matched,alignment}.csv, out/diagnose_status.json
    out/window.csv, out/report.json
    out/plots/<kind>_*.svg
"""

from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__, learnability as lrn, spectra, storage, transport
from .cells import KIND_TAGS
from .config import StudyConfig, derive_seed, parse_config
from .stable_noise import EstimationError, StableFit
from .svgplot import Figure
from .training import Dataset, TrainingError, init_model, generate_task, train

log = logging.getLogger(__name__)

PLOT_NAMES = ("envelope_linear", "envelope_semilog", "envelope_loglog", "window",
              "tau_ccdf", "alpha_hist", "sigma")


class StageError(RuntimeError):
    """A stage could not run because its inputs are missing or unusable."""


def _dirs(out) -> dict[str, Path]:
    out = Path(out)
    return {"root": out, "data": out / "data", "ckpt": out / "checkpoints", "plots": out / "plots"}


# -- gen -------------------------------------------------------------------------


def stage_gen(cfg: StudyConfig, out) -> dict[str, Path]:
    d = _dirs(out)
    d["data"].mkdir(parents=True, exist_ok=True)
    seeds = {"train": derive_seed(cfg.seeds.master, "data.train"),
             "diagnostic": derive_seed(cfg.seeds.master, "data.diagnostic")}
    counts = {"train": cfg.n_train, "diagnostic": cfg.n_diagnostic}
    files = {}
    for name in ("train", "diagnostic"):
        data = generate_task(cfg.task, counts[name], seeds[name])
        files[name] = d["data"] / f"{name}.gwds"
        storage.write_dataset(files[name], data)
    storage.write_manifest(d["data"] / "manifest.json", files,
                           {"counts": counts, "seeds": seeds, "config": cfg.to_dict()})
    return files


def _load_data(out, name: str) -> Dataset:
    path = _dirs(out)["data"] / f"{name}.gwds"
    if not path.exists():
        raise StageError(f"{path} is missing; run `gen` first")
    return storage.read_dataset(path)


# -- train -----------------------------------------------------------------------


@dataclass
class StageStatus:
    ok: dict[str, bool]
    messages: dict[str, str]

    @property
    def all_ok(self) -> bool:
        return all(self.ok.values())


def stage_train(cfg: StudyConfig, out) -> StageStatus:
    d = _dirs(out)
    data = _load_data(out, "train")
    d["ckpt"].mkdir(parents=True, exist_ok=True)
    rows, ok, msgs = [], {}, {}
    for kind in cfg.cells:
        seed = derive_seed(cfg.seeds.master, f"init.{kind.tag}")
        try:
            res = train(kind, seed, data, cfg.train_config_for(kind), H=cfg.H)
        except TrainingError as exc:
            log.error("training %s failed: %s", kind.tag, exc)
            ok[kind.tag], msgs[kind.tag] = False, str(exc)
            continue
        storage.write_checkpoint(d["ckpt"] / f"{kind.tag}.gwck", res.model)
        rows += [(kind.tag, e + 1, loss) for e, loss in enumerate(res.losses)]
        ok[kind.tag], msgs[kind.tag] = True, ""
    storage.write_csv(d["root"] / "loss.csv", ["kind", "epoch", "mean_loss"], rows)
    storage.write_json(d["root"] / "train_status.json", {"ok": ok, "messages": msgs})
    return StageStatus(ok, msgs)


def initial_checkpoints(cfg: StudyConfig, out) -> None:
    """Write the untrained initialisations as checkpoints (zero-epoch study)."""
    d = _dirs(out)
    d["ckpt"].mkdir(parents=True, exist_ok=True)
    for kind in cfg.cells:
        model = init_model(kind, cfg.task.D, cfg.H, derive_seed(cfg.seeds.master, f"init.{kind.tag}"))
        storage.write_checkpoint(d["ckpt"] / f"{kind.tag}.gwck", model)


# -- diagnose --------------------------------------------------------------------


def stage_diagnose(cfg: StudyConfig, out, chunk: int = 32) -> StageStatus:
    d = _dirs(out)
    diag = _load_data(out, "diagnostic")
    lags = cfg.lags()
    anchors = cfg.anchors()
    probe_seed = cfg.probe_seed()
    env_rows, noise_rows, tau_rows, matched_rows, align_rows = [], [], [], [], []
    ok, msgs = {}, {}
    for kind in cfg.cells:
        path = d["ckpt"] / f"{kind.tag}.gwck"
        if not path.exists():
            ok[kind.tag], msgs[kind.tag] = False, f"checkpoint {path.name} missing; kind skipped"
            log.warning(msgs[kind.tag])
            continue
        model = storage.read_checkpoint(path)
        probe = lrn.draw_probe(model.size, probe_seed)
        matched, tensor = lrn.collect_matched_samples(
            model, diag, lags, probe, anchors, cfg.train.learning_rate, cfg.order, chunk)
        env = transport.envelope(tensor)
        env_rows += [(kind.tag, l, f, cfg.order) for l, f in zip(env.lag_grid, env.f_values)]
        for i, l in enumerate(lags):
            matched_rows += [(kind.tag, l, n, s) for n, s in enumerate(matched.samples[i])]
            align_rows.append((kind.tag, l, matched.m_bar[i]))
        try:
            profile = lrn.fit_noise(matched)
            noise_rows += [(kind.tag, l, f.alpha_hat, f.sigma_hat, f.clamped)
                           for l, f in zip(lags, profile.fits)]
            msgs[kind.tag] = ""
        except EstimationError as exc:
            msgs[kind.tag] = f"noise fit failed: {exc}"
            log.warning("%s: %s", kind.tag, msgs[kind.tag])
        spec = spectra.tau_spectrum(tensor)
        for q in range(tensor.H):
            tau_rows.append((kind.tag, q, spec.tau[q], spec.amplitude[q], spec.r_squared[q],
                             spec.absent[q]))
        ok[kind.tag] = True
    r = d["root"]
    storage.write_csv(r / "envelope.csv", ["kind", "lag", "f_hat", "order"], env_rows)
    storage.write_csv(r / "noise.csv", ["kind", "lag", "alpha_hat", "sigma_hat", "clamped"], noise_rows)
    storage.write_csv(r / "tau.csv", ["kind", "neuron", "tau", "C", "r2", "absent_flag"], tau_rows)
    storage.write_csv(r / "matched.csv", ["kind", "lag", "sequence_index", "S_value"], matched_rows)
    storage.write_csv(r / "alignment.csv", ["kind", "lag", "m_bar"], align_rows)
    storage.write_json(r / "diagnose_status.json", {"ok": ok, "messages": msgs, "probe_seed": probe_seed})
    return StageStatus(ok, msgs)


# -- window ----------------------------------------------------------------------


def _group(rows, key="kind"):
    g = defaultdict(list)
    for row in rows:
        g[row[key]].append(row)
    return g


def _read_table(path: Path):
    if not path.exists():
        raise StageError(f"{path} is missing; run `diagnose` first")
    return _group(storage.read_csv(path))


def _fit_dict(curve: transport.EnvelopeCurve) -> dict:
    try:
        reg = spectra.classify_regime(curve)
    except spectra.FitError as exc:
        return {"label": None, "error": str(exc)}
    return {"label": reg.label, "exponential": reg.exponential.to_dict(),
            "powerlaw": reg.powerlaw.to_dict()}


def kind_report(cfg: StudyConfig, env: transport.EnvelopeCurve, profile: lrn.NoiseProfile | None,
                m_bar, tau_rows: list[dict], losses: list[float]) -> dict:
    """Per-kind section of the study report."""
    rep = {
        "envelope": {"lag": env.lag_grid, "f_hat": env.f_values, "order": cfg.order},
        "fits": _fit_dict(env),
        "m_bar": np.asarray(m_bar, dtype=float),
        "loss_history": losses,
        "tau": {
            "tau": [float(r["tau"]) for r in tau_rows],
            "C": [float(r["C"]) for r in tau_rows],
            "r2": [float(r["r2"]) for r in tau_rows],
            "absent": [r["absent_flag"] == "1" for r in tau_rows],
        },
    }
    present = [float(r["tau"]) for r in tau_rows if r["absent_flag"] != "1"]
    mags = np.array([t for t in present if np.isfinite(t)])
    rep["tau"]["p90"] = float(np.percentile(present, 90, method="inverted_cdf")) if present else float("nan")
    rep["tau"]["n_finite"] = int(mags.size)
    if profile is None:
        rep["noise"] = None
        rep["window"] = {"available": False, "reason": "no noise fit", "N": list(cfg.budgets),
                         "H_hat": [], "eps_th": []}
        return rep
    rep["noise"] = {"alpha_hat": profile.alpha_hat, "sigma_hat": profile.sigma_hat,
                    "clamped": profile.clamped, "alpha_pooled": profile.alpha_pooled}
    win = lrn.window_report(env, profile, m_bar, cfg.budgets, cfg.epsilon, cfg.c_alpha)
    rep["window"] = {"available": win.available, "reason": win.reason, "N": win.budgets,
                     "H_hat": win.H_hat, "eps_th": [c.eps_th for c in win.thresholds]}
    return rep


def stage_window(cfg: StudyConfig, out) -> dict:
    r = _dirs(out)["root"]
    envs = _read_table(r / "envelope.csv")
    noise = _read_table(r / "noise.csv")
    align = _read_table(r / "alignment.csv")
    taus = _read_table(r / "tau.csv")
    matched_counts = {k: v for k, v in _count_matched(r / "matched.csv").items()}
    losses = _group(storage.read_csv(r / "loss.csv")) if (r / "loss.csv").exists() else {}
    kinds = {}
    rows = []
    for kind in cfg.cells:
        tag = kind.tag
        if tag not in envs:
            continue
        env = transport.EnvelopeCurve(np.array([int(x["lag"]) for x in envs[tag]]),
                                      np.array([float(x["f_hat"]) for x in envs[tag]]))
        m_bar = np.array([float(x["m_bar"]) for x in align[tag]])
        profile = None
        if tag in noise:
            fits = [StableFit(float(x["alpha_hat"]), float(x["sigma_hat"]), matched_counts.get(tag, 0),
                              x["clamped"] == "1") for x in noise[tag]]
            alpha = np.array([f.alpha_hat for f in fits])
            profile = lrn.NoiseProfile(env.lag_grid.copy(), fits, float(np.median(alpha)))
        hist = [float(x["mean_loss"]) for x in losses.get(tag, [])]
        rep = kind_report(cfg, env, profile, m_bar, taus.get(tag, []), hist)
        kinds[tag] = rep
        w = rep["window"]
        pooled = rep["noise"]["alpha_pooled"] if rep["noise"] else float("nan")
        if w["available"]:
            rows += [(tag, n, h, cfg.epsilon, cfg.c_alpha, pooled) for n, h in zip(w["N"], w["H_hat"])]
        else:
            rows += [(tag, n, "NA", cfg.epsilon, cfg.c_alpha, pooled) for n in w["N"]]
    storage.write_csv(r / "window.csv", ["kind", "N", "H_hat", "epsilon", "c_alpha", "alpha_pooled"], rows)
    report = {"version": __version__, "config": cfg.to_dict(), "kinds": kinds}
    storage.write_json(r / "report.json", report)
    return storage.read_json(r / "report.json")


def _count_matched(path: Path) -> dict[str, int]:
    """Sequences per lag for each kind in matched.csv."""
    if not path.exists():
        return {}
    per = defaultdict(set)
    for row in storage.read_csv(path):
        per[row["kind"]].add(row["sequence_index"])
    return {k: len(v) for k, v in per.items()}


# -- plot ------------------------------------------------------------------------


class ReportError(ValueError):
    """Report document is malformed."""


def _num(v) -> float:
    return float(v) if v is not None else float("nan")


def validate_report(report) -> None:
    if not isinstance(report, dict) or "kinds" not in report or "config" not in report:
        raise ReportError("report must hold 'config' and 'kinds'")
    parse_config(report["config"])
    for tag, rep in report["kinds"].items():
        if tag not in KIND_TAGS:
            raise ReportError(f"unknown cell kind {tag!r} in report")
        try:
            lags = rep["envelope"]["lag"]
            f = rep["envelope"]["f_hat"]
            rep["tau"]["tau"], rep["window"]["N"], rep["window"]["H_hat"]
        except (KeyError, TypeError) as exc:
            raise ReportError(f"kind {tag}: missing field {exc}") from None
        if len(lags) != len(f) or not lags:
            raise ReportError(f"kind {tag}: envelope lag and value lists differ")


def figures_for(tag: str, rep: dict) -> dict[str, Figure]:
    lags = np.asarray(rep["envelope"]["lag"], dtype=float)
    f = np.array([_num(storage.as_float(v)) for v in rep["envelope"]["f_hat"]])
    figs = {}
    for name, xs, ys in (("envelope_linear", "linear", "linear"), ("envelope_semilog", "linear", "log"),
                         ("envelope_loglog", "log", "log")):
        figs[name] = Figure(f"{tag}: envelope ({name.split('_')[1]})", "lag", "f_hat",
                            xs, ys).add(lags, f, tag, "line")
    w = rep["window"]
    fig = Figure(f"{tag}: learnability window", "N (sequences)", "H_hat", "log", "linear")
    if w.get("available") and w["H_hat"]:
        fig.add(w["N"], w["H_hat"], tag, "steps")
    figs["window"] = fig
    taus = np.array([storage.as_float(t) for t, a in zip(rep["tau"]["tau"], rep["tau"]["absent"]) if not a])
    taus = taus[np.isfinite(taus) & (taus > 0)]
    fig = Figure(f"{tag}: time-scale CCDF", "tau", "P(tau_q >= tau)", "log", "log")
    if taus.size:
        cc = spectra.ccdf(taus)
        fig.add(cc.thresholds, cc.survival, tag, "steps")
    figs["tau_ccdf"] = fig
    fig = Figure(f"{tag}: tail index per lag", "alpha_hat", "count")
    sig = Figure(f"{tag}: noise scale per lag", "lag", "sigma_hat", "linear", "log")
    if rep.get("noise"):
        alpha = np.array(rep["noise"]["alpha_hat"], dtype=float)
        counts, edges = np.histogram(alpha, bins=np.linspace(0.5, 2.0, 16))
        fig.add_histogram(edges, counts, tag)
        sig.add(lags, np.array(rep["noise"]["sigma_hat"], dtype=float), tag, "line")
    figs["alpha_hist"] = fig
    figs["sigma"] = sig
    return figs


def stage_plot(report, out) -> list[Path]:
    validate_report(report)
    pdir = Path(out)
    pdir.mkdir(parents=True, exist_ok=True)
    written = []
    for tag in sorted(report["kinds"]):
        figs = figures_for(tag, report["kinds"][tag])
        for name in PLOT_NAMES:
            p = pdir / f"{tag}_{name}.svg"
            p.write_text(figs[name].to_svg())
            written.append(p)
    return written


def run_all(cfg: StudyConfig, out) -> dict:
    """gen, train, diagnose, window and plot in sequence; returns the report."""
    stage_gen(cfg, out)
    stage_train(cfg, out)
    stage_diagnose(cfg, out)
    report = stage_window(cfg, out)
    stage_plot(report, _dirs(out)["plots"])
    return report
