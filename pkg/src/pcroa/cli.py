"""Command-line pipeline: ``pcroa <command> <config> [flags]``.

Commands run the library modules in the order
tensor -> expand -> simulate -> equilibrium -> roa -> recover -> validate;
each one reuses earlier artifacts from the output directory when their config
hash matches, and recomputes them otherwise.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
from filelock import FileLock, Timeout
from matplotlib.path import Path as MplPath

from . import __version__, roa, sim
from .basis import galerkin_tensor
from .config import Config, load_config
from .errors import ConfigError, PcroaError, SosInfeasibleError, ValidationFailure
from .expand import equilibrium_set_stats, expand_system, reconstruct_sample

log = logging.getLogger("pcroa")

COMMANDS = ("tensor", "expand", "simulate", "equilibrium", "roa", "recover", "validate", "all")
# wall-clock figures go to run.log only so JSON artifacts stay byte-identical across reruns
_VOLATILE = {"runtime_s"}


def _clean(obj, dropped, path=""):
    if isinstance(obj, dict):
        out = {}
        for k, v in obj.items():
            k = str(k)
            if k in _VOLATILE:
                dropped[f"{path}/{k}"] = v
                continue
            out[k] = _clean(v, dropped, f"{path}/{k}")
        return out
    if isinstance(obj, (list, tuple)):
        return [_clean(v, dropped, path) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist(), dropped, path)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


class Runner:
    def __init__(self, cfg: Config, out: Path, figures: bool = True):
        self.cfg = cfg
        self.out = Path(out)
        self.figures = figures and "png" in cfg.section("output")["formats"]
        self.meta = {"toolkit": "pcroa", "version": __version__, "config_hash": cfg.hash,
                     "config_name": cfg.name}
        self._pce = None

    # -- artifact io --

    def path(self, name) -> Path:
        return self.out / name

    def write_json(self, name, payload: dict):
        dropped = {}
        doc = _clean({"meta": self.meta, **payload}, dropped)
        text = json.dumps(doc, sort_keys=True, indent=1, allow_nan=False)
        self.path(name).write_text(text + "\n", encoding="utf-8")
        for k, v in dropped.items():
            log.info("%s%s = %s", name, k, v)
        log.info("wrote %s", name)

    def write_csv(self, name, header, rows):
        with open(self.path(name), "w", newline="", encoding="utf-8") as fh:
            fh.write(f"# pcroa {__version__} config {self.cfg.hash}\n")
            w = csv.writer(fh)
            w.writerow(header)
            for r in rows:
                w.writerow([f"{float(v):.17g}" for v in r])
        log.info("wrote %s", name)

    def read_json(self, name):
        """Earlier artifact, or None when missing or produced by another config."""
        p = self.path(name)
        if not p.exists():
            return None
        doc = json.loads(p.read_text(encoding="utf-8"))
        if doc.get("meta", {}).get("config_hash") != self.cfg.hash:
            log.info("ignoring stale %s", name)
            return None
        return doc

    def figure(self, fn, name, *args, **kw):
        if self.figures:
            fn(*args, path=self.path(name), **kw)
            log.info("wrote %s", name)

    # -- commands --

    @property
    def pce(self):
        if self._pce is None:
            self._pce = expand_system(self.cfg.system, self.cfg.family, self.cfg.p,
                                      max_rank=self.cfg.max_rank, cache_dir=self.cfg.cache_dir)
        return self._pce

    def tensor(self):
        deg = max((r.degree for r in self.cfg.system.rhs), default=0)
        cache = self.cfg.cache_dir or str(self.out / "tensors")
        info = []
        for rank in range(2, deg + 2):
            t = galerkin_tensor(self.cfg.family, self.cfg.p, rank, cache_dir=cache)
            info.append({"rank": rank, "entries": len(t)})
        self.write_json("tensors.json", {"family": self.cfg.family.value, "p": self.cfg.p,
                                         "cache_dir": Path(cache).name, "tensors": info})
        return info

    def expand(self):
        P = self.pce
        self.write_json("expanded.json", {
            "family": P.family.value, "p": P.p, "states": list(P.states), "names": list(P.names),
            "mode_major": P.mode_major.tolist(), "mean_indices": P.mean_indices,
            "param_coeffs": {k: np.asarray(v).tolist() for k, v in sorted(P.param_coeffs.items())},
            "rhs": [{"name": nm, "terms": roa.poly_to_list(r), "text": r.to_str()}
                    for nm, r in zip(P.names, P.rhs)],
        })
        return P

    def simulate(self):
        s = self.cfg.section("simulate")
        if "mean_start" not in s:
            raise ConfigError("simulate needs simulate/mean_start", module="cli", operation="run",
                              code="missing_section")
        ts = np.linspace(0.0, s["t_end"], s["n_points"])
        opts = sim.IntegratorOptions(t_eval=ts)
        P = self.pce
        tr = sim.integrate(P.polymap, P.mean_start(s["mean_start"]), s["t_end"], opts)
        self.write_csv("modes.csv", ["t", *P.names], np.column_stack([tr.times, tr.states]))
        final = np.abs(tr.states[-1])
        summary = {"p": P.p, "t_end": s["t_end"], "mean_start": s["mean_start"], "reason": tr.reason,
                   "final_abs": dict(zip(P.names, final.tolist())),
                   "max_final_abs": float(final.max()),
                   "peak_abs": dict(zip(P.names, np.max(np.abs(tr.states), axis=0).tolist()))}
        self.figure(_plot("plot_modes"), "modes.png", tr.times, tr.states, P.names,
                    title=f"coefficient states, p={P.p}")
        probe = s.get("probe_p")
        if probe is not None and probe > P.p:
            Q = expand_system(self.cfg.system, self.cfg.family, probe, max_rank=self.cfg.max_rank,
                              cache_dir=self.cfg.cache_dir)
            tq = sim.integrate(Q.polymap, Q.mean_start(s["mean_start"]), s["t_end"], opts)
            self.write_csv(f"modes_p{probe}.csv", ["t", *Q.names], np.column_stack([tq.times, tq.states]))
            peaks = np.max(np.abs(tq.states), axis=0).reshape(Q.n, probe + 1)
            low = float(peaks[:, : P.p + 1].max())
            high = float(peaks[:, P.p + 1:].max())
            shared = [Q.index(d, i) for d in range(Q.n) for i in range(P.p + 1)]
            summary["probe"] = {
                "p": probe,
                "peak_low_orders": low,
                "peak_high_orders": high,
                "high_to_low_ratio": high / low if low > 0 else math.inf,
                "max_shared_deviation": float(np.max(np.abs(tq.states[:, shared] - tr.states))),
            }
            self.figure(_plot("plot_modes"), f"modes_p{probe}.png", tq.times, tq.states, Q.names,
                        title=f"coefficient states, p={probe}")
        self.write_json("simulate.json", summary)
        return summary

    def equilibrium(self, reuse=False):
        if reuse:
            doc = self.read_json("equilibrium.json")
            if doc is not None:
                return np.array(doc["x_ep"], dtype=float)
        e = self.cfg.section("equilibrium")
        if "mean_start" not in e:
            raise ConfigError("equilibrium needs equilibrium/mean_start", module="cli", operation="run",
                              code="missing_section")
        P = self.pce
        x_ep = sim.find_equilibrium(P, P.mean_start(e["mean_start"]),
                                    sim.EquilibriumOptions(t_max=e["t_max"], sim_tol=e["tol"]))
        stats = equilibrium_set_stats(x_ep, P.family, n=P.n)
        eig = np.linalg.eigvals(P.jacobian(x_ep))
        # the germ endpoints (or +-2 for a Gaussian germ) give two members of the equilibrium set
        xi = np.array([-1.0, 1.0]) if P.family.value == "legendre" else np.array([-2.0, 2.0])
        members = []
        for x in xi:
            pt = reconstruct_sample(x_ep, P.family, x, n=P.n)
            vals = {nm: float(sp.sample_map(P.family)(x)) for nm, sp in self.cfg.system.params}
            res = max(abs(r.eval(pt)) for r in self.cfg.system.sampled_rhs(vals)) if vals else 0.0
            members.append({"xi": float(x), "state": pt.tolist(), "params": vals, "residual": float(res)})
        doc = {
            "names": list(P.names),
            "x_ep": x_ep.tolist(),
            "residual": float(np.max(np.abs(P.f(x_ep)))),
            "max_real_eig": float(eig.real.max()),
            "stats": stats.to_dict(P.mode_major),
            "members": members,
        }
        self.write_json("equilibrium.json", doc)
        return x_ep

    def _roa_opts(self, deg_V=None):
        r = self.cfg.section("roa")
        return roa.RoaOptions(deg_V=deg_V or r["deg_V"], deg_s1=r["deg_s1"], deg_s2=r["deg_s2"],
                              l_coeff=r["l_coeff"], max_iter=r["max_iter"], obj_tol=r["obj_tol"],
                              verify_tol=r["verify_tol"], eps_cap=r["eps_cap"],
                              quadratic_warm_start=r["quadratic_warm_start"])

    def roa(self):
        x_ep = self.equilibrium(reuse=True)
        opts = self._roa_opts()
        P = self.pce
        certs = {}
        hists = []
        if opts.deg_V == 4 and opts.quadratic_warm_start:
            q = roa.estimate_roa(P, x_ep, replace(opts, deg_V=2, deg_s1=None, deg_s2=None))
            self.write_json("certificate_quadratic.json", q.to_dict())
            certs["quadratic"] = q
            hists.append(("deg V = 2", q.history))
            c = roa.estimate_roa(P, x_ep, opts, warm_start=q)
        else:
            c = roa.estimate_roa(P, x_ep, opts)
        self.write_json("certificate.json", c.to_dict())
        certs["main"] = c
        hists.append((f"deg V = {opts.deg_V}", c.history))
        self.figure(_plot("plot_history"), "roa_history.png", hists, title="alternation progress")
        if c.status != "optimal":
            log.warning("certificate status %s (best verified iterate kept)", c.status)
        if not c.verified(opts.verify_tol):
            raise SosInfeasibleError("returned certificate fails verification", module="roa",
                                     operation="estimate_roa", code="unverified")
        return certs

    def _certificates(self):
        doc = self.read_json("certificate.json")
        if doc is None:
            certs = self.roa()
            return certs["main"], certs.get("quadratic")
        qd = self.read_json("certificate_quadratic.json")
        main = roa.RoaCertificate.from_dict(doc)
        quad = roa.RoaCertificate.from_dict(qd) if qd is not None and main.deg_V != 2 else None
        return main, quad

    def recover(self):
        cert, quad = self._certificates()
        rec = self.cfg.section("recover")
        ropts = roa.RecoverOptions(deg_s1=rec["deg_s1"])
        names = [f"{s}_0" for s in self.cfg.system.states]
        entries, boundaries, failures = [], [], []
        for k, sig in enumerate(self.cfg.sweep()):
            entry = {"index": k, "sigma2": sig.tolist()}
            try:
                r = roa.recover_r0(cert, sig, ropts)
            except SosInfeasibleError as exc:
                entry.update({"status": "infeasible", "error": exc.to_dict()})
                failures.append(exc)
                entries.append(entry)
                continue
            self.write_json(f"r0_{k}.json", r.to_dict())
            entry.update({"status": r.status, "method": r.method})
            if cert.n == 2:
                B = r.boundary(720)
                self.write_csv(f"r0_{k}_boundary.csv", names, B)
                entry["area"] = roa.polygon_area(B)
                boundaries.append((f"sigma2 = {_fmt_sigma(sig)}", B, sig))
            entries.append(entry)
        summary = {"deg_V": cert.deg_V, "entries": entries}
        if cert.n == 2:
            areas = [e.get("area") for e in entries]
            ok = all(a is not None for a in areas)
            summary["areas_strictly_decreasing"] = bool(ok and all(a > b for a, b in zip(areas, areas[1:])))
            plot_sets = [(lab, B) for lab, B, _ in boundaries]
            zero = [B for _, B, s in boundaries if not np.any(s)]
            if quad is not None:
                Bq = roa.slice_zero_variance(quad).boundary(720)
                self.write_csv("r0_quadratic_boundary.csv", names, Bq)
                summary["quadratic_zero_variance_area"] = roa.polygon_area(Bq)
                plot_sets.append(("deg V = 2, sigma2 = 0", Bq))
                zero.append(Bq)
            outer = []
            ob = rec.get("outer_bounds")
            if ob:
                checks = []
                for j, vals in enumerate(ob["params"]):
                    cyc = sim.limit_cycle(self.cfg.system.sampled_rhs(vals), ob["start"], backward=True)
                    self.write_csv(f"outer_{j}.csv", list(self.cfg.system.states), cyc)
                    inside = [bool(MplPath(cyc).contains_points(B).all()) for B in zero]
                    checks.append({"params": vals, "vertices": len(cyc), "zero_variance_inside": inside})
                    outer.append((f"limit cycle {vals}", cyc))
                summary["outer_bounds"] = checks
            self.figure(_plot("plot_r0"), "r0.png", plot_sets, outer=outer, center=cert.x_ep[cert.mean_indices],
                        title="certified initial-mean sets")
        self.write_json("recover.json", summary)
        if failures:
            raise failures[0]
        return summary

    def validate(self, seed=None):
        cert, _ = self._certificates()
        v = self.cfg.section("validate")
        seed = v["seed"] if seed is None else seed
        if cert.n != 2:
            raise ConfigError("boundary validation needs a two-state system", module="cli",
                              operation="validate", code="not_planar")
        # deterministic initial states: the zero-variance slice of the certificate
        r0 = roa.slice_zero_variance(cert)
        B = r0.boundary(v["n_initials"]) if v["n_initials"] else np.zeros((0, 2))
        x_ep = cert.x_ep
        stats = equilibrium_set_stats(x_ep, cert.family, n=cert.n)
        mco = sim.McOptions(t_end=v["t_end"], conv_radius=v["conv_radius"])
        rep = sim.monte_carlo_validate(self.cfg.system, stats, B, len(B), v["n_realizations"], seed, mco)
        out = {"boundary": rep.to_dict(), "outer": []}
        conv_pts, div_pts = [], []
        C = r0.mean_center
        for scale in v["outer_scales"]:
            pts = C + scale * (r0.boundary(v["outer_n"]) - C)
            ro = sim.monte_carlo_validate(self.cfg.system, stats, pts, len(pts), v["n_realizations"], seed, mco)
            d = ro.to_dict()
            out["outer"].append({"scale": scale, "diverged_count": d["diverged_count"],
                                 "converged_count": d["converged_count"],
                                 "inconclusive_count": d["inconclusive_count"],
                                 "diverged": d["diverged"]})
            bad = np.any(ro.status == "diverged", axis=1)
            div_pts.extend(pts[bad])
            conv_pts.extend(pts[~bad])
        self.write_json("mc_report.json", out)
        if self.figures and len(B):
            trajs = []
            xi = sim.germ_realizations(cert.family, 8, sim.make_rng(seed))
            for x0 in B[:: max(1, len(B) // 3)][:3]:
                for x in xi:
                    vals = {nm: float(sp.sample_map(cert.family)(x)) for nm, sp in self.cfg.system.params}
                    T = sim.integrate(self.cfg.system.sampled_rhs(vals), x0, min(v["t_end"], 30.0),
                                      sim.IntegratorOptions(rtol=1e-6, atol=1e-9))
                    trajs.append(T.states)
            self.figure(_plot("plot_validation"), "validation.png", B, converged=conv_pts,
                        diverged=div_pts, trajectories=trajs, title="Monte-Carlo validation")
        if rep.converged_count != rep.total:
            raise ValidationFailure(
                f"{rep.total - rep.converged_count} of {rep.total} boundary samples did not converge "
                f"({rep.diverged_count} diverged)", module="sim", operation="monte_carlo_validate",
                code="diverging_samples")
        return out


def _fmt_sigma(s):
    s = np.asarray(s)
    if np.allclose(s, s[0, 0] * np.eye(len(s))):
        return f"{s[0, 0]:g} I"
    return np.array2string(s, precision=3)


def _plot(name):
    # lazy import keeps matplotlib out of the non-figure commands
    from . import plotting
    return getattr(plotting, name)


def build_parser():
    ap = argparse.ArgumentParser(prog="pcroa", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("config", help="experiment JSON (bundled names such as vdp.json also work)")
    ap.add_argument("--out", help="output directory (default: output/directory from the config)")
    ap.add_argument("--seed", type=int, help="Monte-Carlo seed")
    ap.add_argument("--p", type=int, help="PCE truncation order")
    ap.add_argument("--deg-v", type=int, choices=(2, 4), help="Lyapunov function degree")
    ap.add_argument("--sigma", help="JSON file with a list of initial covariances (scalars or matrices)")
    ap.add_argument("--no-figures", action="store_true", help="skip PNG rendering")
    ap.add_argument("--quiet", action="store_true")
    return ap


def run(command, config, *, out=None, seed=None, p=None, deg_v=None, sigma=None, figures=True):
    overrides = {"pce.p": p, "roa.deg_V": deg_v, "validate.seed": seed}
    if sigma is not None:
        try:
            sweep = json.loads(Path(sigma).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read sweep file {sigma}: {exc}", module="cli", operation="run",
                              code="sweep_file") from exc
        overrides["recover.sweep"] = sweep if isinstance(sweep, list) else [sweep]
    cfg = load_config(config, overrides)
    outdir = Path(out or cfg.section("output")["directory"])
    outdir.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(outdir / ".pcroa.lock"))
    try:
        lock.acquire(timeout=0)
    except Timeout:
        raise PcroaError(f"another pcroa run holds the lock in {outdir}", module="cli", operation="run",
                         code="locked") from None
    handler = logging.FileHandler(outdir / "run.log", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    logging.getLogger().addHandler(handler)
    t0 = time.perf_counter()
    try:
        r = Runner(cfg, outdir, figures=figures)
        (outdir / "config.json").write_text(json.dumps(cfg.raw, sort_keys=True, indent=1) + "\n",
                                            encoding="utf-8")
        log.info("%s %s (config %s) -> %s", command, cfg.source, cfg.hash, outdir)
        steps = {
            "tensor": [r.tensor],
            "expand": [r.expand],
            "simulate": [r.simulate],
            "equilibrium": [r.equilibrium],
            "roa": [r.roa],
            "recover": [r.recover],
            "validate": [r.validate],
            "all": [r.tensor, r.expand, r.simulate, r.equilibrium, r.roa, r.recover, r.validate],
        }[command]
        result = None
        for step in steps:
            ts = time.perf_counter()
            result = step()
            log.info("%s finished in %.2f s", step.__name__, time.perf_counter() - ts)
        return result
    finally:
        log.info("total %.2f s", time.perf_counter() - t0)
        logging.getLogger().removeHandler(handler)
        handler.close()
        lock.release()


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.getLogger().setLevel(logging.INFO)
    err = logging.StreamHandler(sys.stderr)
    err.setLevel(logging.WARNING if args.quiet else logging.INFO)
    err.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    logging.getLogger().addHandler(err)
    try:
        run(args.command, args.config, out=args.out, seed=args.seed, p=args.p, deg_v=args.deg_v,
            sigma=args.sigma, figures=not args.no_figures)
    except PcroaError as exc:
        log.error("[%s.%s:%s] %s", exc.module or "pcroa", exc.operation or "?", exc.code, exc)
        return exc.exit_code
    finally:
        logging.getLogger().removeHandler(err)
    return 0


if __name__ == "__main__":
    sys.exit(main())
