"""Configuration-driven command line driver.

    resonate <command> --config <path> [--set k=v]... [--out <dir>]

Commands: mesh, eigs, resonance, sweep, splitting, nodal, gluing, wave, report.
Exit codes: 0 success, 2 config error, 3 numerical-guard failure, 4 missing
dependency artifact.  RESONATE_THREADS caps sweep workers.
"""

from __future__ import annotations

import argparse
import datetime
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, fem, gluing, nodal, resonance, spectra, wave
from .config import ConfigError, apply_overrides, domain_spec, load_config
from .geometry import CavitySpec, DumbbellSpec, GeometryError, ResonatorSpec, build_resonator, cavity_from_config
from .meshfile import save_mesh
from .meshing import MeshError, REG_NECK, mesh_rectangle, triangulate, triangulate_pair, triangulate_truncated
from .reporting import fit_line, svg_plot, write_csv, write_json

EXIT_OK, EXIT_CONFIG, EXIT_GUARD, EXIT_MISSING = 0, 2, 3, 4

GUARD_ERRORS = (MeshError, GeometryError, fem.SolveError, spectra.EigenError,
                resonance.ResonanceError, gluing.GluingError, nodal.NodalError,
                wave.WaveError)


def _workers():
    cap = os.environ.get("RESONATE_THREADS")
    n = os.cpu_count() or 1
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            raise ConfigError(f"RESONATE_THREADS={cap!r} is not an integer")
    return min(n, 8)


class Manifest:
    def __init__(self, out: Path, command: str, cfg: dict):
        self.data = {
            "tool": "resonate",
            "version": __version__,
            "command": command,
            "config": cfg,
            "seeds": {"mesh": cfg.get("mesh", {}).get("seed", 0)},
            "mesh_hashes": {},
            "outputs": [],
            "started": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        }
        self.out = out

    def add_mesh(self, name, mesh):
        self.data["mesh_hashes"][name] = mesh.hash()

    def add_output(self, path: Path):
        self.data["outputs"].append(str(path.relative_to(self.out)))

    def write(self):
        self.data["finished"] = datetime.datetime.now(
            datetime.timezone.utc).isoformat()
        write_json(self.out / "manifest.json", self.data)


def _mesh_params(cfg):
    m = cfg.get("mesh", {})
    return (float(m.get("h", 0.1)), int(m.get("neck_layers", 8)),
            int(m.get("order", 2)), int(m.get("seed", 0)))


def _build_mesh(cfg, eps=None):
    h, nl, order, seed = _mesh_params(cfg)
    spec = domain_spec(cfg, eps)
    if isinstance(spec, tuple) and spec[0] == "rectangle":
        return mesh_rectangle(spec[1], spec[2], h), None
    return triangulate(spec, h, nl, seed), spec


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_mesh(cfg, out: Path, man: Manifest):
    mesh, _ = _build_mesh(cfg)
    save_mesh(mesh, out / "domain.mesh")
    man.add_mesh("domain", mesh)
    man.add_output(out / "domain.mesh")
    q = mesh.quality()
    write_json(out / "mesh_quality.json", {
        "min_angle_deg": q.min_angle_deg, "max_aspect": q.max_aspect,
        "h_max_per_region": q.h_max_per_region,
        "n_vertices": q.n_vertices, "n_triangles": q.n_triangles})
    man.add_output(out / "mesh_quality.json")
    print(f"mesh: {q.n_triangles} triangles, min angle {q.min_angle_deg:.2f} deg")
    return EXIT_OK


def cmd_eigs(cfg, out: Path, man: Manifest):
    h, nl, order, seed = _mesh_params(cfg)
    e = cfg.get("eigs", {})
    count = int(e.get("count", 6))
    shift = float(e.get("shift", 0.0))
    probe = tuple(e.get("probe", (-0.3, 0.0)))
    mesh, _ = _build_mesh(cfg)
    man.add_mesh("domain", mesh)
    asm = fem.assemble(mesh, order)
    pairs = spectra.dirichlet_eigs(asm, count, shift=shift, probe_point=probe,
                                   seed=seed + 7)
    rows = [(k, p.value, p.residual, p.clustered)
            for k, p in enumerate(pairs, start=1)]
    write_csv(out / "eigenvalues.csv",
              ["index", "eigenvalue", "residual", "clustered"], rows)
    man.add_output(out / "eigenvalues.csv")
    for r in rows:
        print(f"  lambda_{r[0]} = {r[1]:.8f}  (residual {r[2]:.1e})")
    return EXIT_OK


def _sweep_cfg(cfg):
    sw = cfg.get("sweep", {})
    eps_list = [float(e) for e in sw.get("eps_list", (0.40, 0.33, 0.28, 0.24, 0.21))]
    sigma0 = sw.get("sigma0")
    return eps_list, (float(sigma0) if sigma0 is not None else None)


def _resonator_pieces(cfg):
    dom = cfg["domain"]
    if dom["kind"] != "resonator":
        raise ConfigError("domain.kind: this command needs a resonator domain")
    cavity = cavity_from_config(dom["cavity"])
    return cavity, float(dom["L"])


def cmd_resonance(cfg, out: Path, man: Manifest):
    h, nl, order, seed = _mesh_params(cfg)
    cavity, L = _resonator_pieces(cfg)
    eps = float(cfg["domain"].get("eps", 0.3))
    lam0, gap = resonance.cavity_reference(cavity, h, order, seed)
    row = resonance.sweep_row(cavity, L, eps, h, nl, order, lam0, gap,
                              seed=seed)
    write_csv(out / "resonance.csv",
              ["epsilon", "L", "re_rho", "im_rho", "pml_spread", "flagged"],
              [(row.eps, L, row.rho.real, row.rho.imag, row.pml_spread,
                row.excluded)])
    man.add_output(out / "resonance.csv")
    print(f"rho({eps}) = {row.rho.real:.8f} {row.rho.imag:+.3e} j  "
          f"(spread {row.pml_spread:.2e}, flagged={row.excluded})")
    return EXIT_OK


def cmd_sweep(cfg, out: Path, man: Manifest):
    h, nl, order, seed = _mesh_params(cfg)
    cavity, L = _resonator_pieces(cfg)
    eps_list, sigma0 = _sweep_cfg(cfg)
    lam0, gap = resonance.cavity_reference(cavity, h, order, seed)
    res = resonance.width_sweep(cavity, L, eps_list, h, nl, order, lam0, gap,
                                pml_sigma0=sigma0, seed=seed,
                                workers=_workers())
    rows = [(r.eps, L, r.rho.real, r.rho.imag, r.eps_ln_im, res.target,
             r.pml_spread, r.excluded) for r in res.rows]
    write_csv(out / "sweep.csv",
              ["epsilon", "L", "re_rho", "im_rho", "eps_ln_im", "slope_target",
               "pml_spread", "flag"], rows)
    man.add_output(out / "sweep.csv")
    good = [r for r in res.rows if not r.excluded]
    xs = [1.0 / r.eps for r in good]
    ys = [math.log(r.im_abs) for r in good]
    line_x = [min(xs), max(xs)]
    svg_plot(out / "sweep.svg",
             [{"x": xs, "y": ys, "label": "ln|Im rho|", "style": "points"},
              {"x": line_x, "y": [res.slope * x + res.intercept for x in line_x],
               "label": f"fit {res.slope:.3f}", "style": "line"},
              {"x": line_x,
               "y": [res.target * (x - xs[0]) + ys[0] for x in line_x],
               "label": f"target {res.target:.3f}", "style": "dashed"}],
             title="resonance width sweep", xlabel="1/eps", ylabel="ln|Im rho|")
    man.add_output(out / "sweep.svg")
    write_json(out / "sweep_fit.json", {
        "slope": res.slope, "target": res.target, "intercept": res.intercept,
        "fit_residual": res.fit_residual,
        "corrected_slope": resonance.prefactor_corrected_slope(res.rows)[0],
        "lam0": lam0, "gap": gap})
    man.add_output(out / "sweep_fit.json")
    print(f"slope = {res.slope:.4f}  target = {res.target:.4f}  "
          f"(residual {res.fit_residual:.3f})")
    return EXIT_OK


def cmd_splitting(cfg, out: Path, man: Manifest):
    h, nl, order, seed = _mesh_params(cfg)
    dom = cfg["domain"]
    if dom["kind"] != "dumbbell":
        raise ConfigError("domain.kind: splitting needs a dumbbell domain")
    cavity = cavity_from_config(dom["cavity"])
    L = float(dom["L"])
    eps_list, _ = _sweep_cfg(cfg)
    res = spectra.splitting(cavity, L, eps_list, h, nl, order, seed=seed)
    rows = [(r.eps, r.e1, r.e2, r.gap, r.parity_ok) for r in res.rows]
    write_csv(out / "splitting.csv",
              ["epsilon", "E1", "E2", "gap", "parity_ok"], rows)
    man.add_output(out / "splitting.csv")
    print(f"splitting slope {res.slope:.4f}  target {res.target:.4f}")
    return EXIT_OK


def cmd_nodal(cfg, out: Path, man: Manifest):
    h, nl, order, seed = _mesh_params(cfg)
    ncfg = cfg.get("nodal", {})
    k_idx = int(ncfg.get("mode_index", 3))
    eps_list = [float(e) for e in ncfg.get("eps_list", (0.3, 0.25, 0.2, 0.15))]
    delta_factor = float(ncfg.get("delta_factor", 3.0))
    cavity, L = _resonator_pieces(cfg)

    lam0, gap = resonance.cavity_reference(cavity, h, order, seed,
                                           count=max(6, k_idx + 2), index=k_idx)
    probe = tuple(ncfg.get("probe", (-0.25, 0.0)))
    results = []
    for eps in eps_list:
        spec = build_resonator(cavity, L, eps)
        cm, im = triangulate_pair(spec, h, nl, seed)
        asm_c = fem.assemble(cm, order)
        u0 = spectra.dirichlet_eigs(asm_c, max(6, k_idx + 2), shift=0.0,
                                    probe_point=probe, seed=seed + 7)[k_idx - 1]
        asm_e = fem.assemble(im, order)
        veps = spectra.track_eigenvalue(asm_e, u0.value, gap, probe_point=probe,
                                        seed=seed + 7)
        dec_u = nodal.nodal_domains(asm_c.space, u0.coeffs)
        dec_v = nodal.nodal_domains(asm_e.space, veps.coeffs)
        delta = min(delta_factor * eps,
                    0.9 * nodal.anchor_nodal_distance(asm_c.space, dec_u))
        rep = nodal.neck_positivity(asm_e.space, veps.coeffs, delta,
                                    u0_space=asm_c.space, u0_decomp=dec_u,
                                    u0_pair=u0)
        floor = nodal.volume_floor_check(dec_v, veps.value)
        neck_area = float(im.areas()[im.tri_region == REG_NECK].sum())
        results.append({
            "eps": eps, "lam_eps": veps.value, "count_u0": dec_u.count,
            "count_veps": dec_v.count, "positivity": rep.passed,
            "min_value": rep.min_value, "max_value": rep.max_value,
            "hopf_max_flux": rep.hopf_max_flux, "delta": delta,
            "floor_ok": floor.passed, "band_volume": dec_v.band_volume,
            "volumes": dec_v.volumes.tolist(), "neck_area": neck_area,
        })
    write_json(out / "nodal.json", {
        "mode_index": k_idx, "lam0": lam0, "rows": results,
        "verdicts": {
            "positivity": all(r["positivity"] for r in results),
            "monotone_count": all(r["count_veps"] <= r["count_u0"]
                                  for r in results),
            "floor": all(r["floor_ok"] for r in results)}})
    man.add_output(out / "nodal.json")
    print(f"nodal: counts {[r['count_veps'] for r in results]} <= "
          f"{results[0]['count_u0']}, positivity "
          f"{all(r['positivity'] for r in results)}")
    return EXIT_OK


def cmd_gluing(cfg, out: Path, man: Manifest):
    h, nl, order, seed = _mesh_params(cfg)
    gcfg = cfg.get("gluing", {})
    eps_list = [float(e) for e in gcfg.get("eps_list", (0.4, 0.3, 0.2, 0.15))]
    n_probes = int(gcfg.get("n_probes", 2))
    cavity, L = _resonator_pieces(cfg)
    lam0, gap = resonance.cavity_reference(cavity, h, order, seed)
    radius = 0.5 * gap
    rows = []
    rng = np.random.default_rng(seed + 3)
    for eps in eps_list:
        spec = build_resonator(cavity, L, eps)
        cm, im = triangulate_pair(spec, h, nl, seed)
        dd = gluing.decompose(im, order)
        z = lam0 + 1j * radius
        f = np.zeros(dd.space.n_nodes)
        f[dd.space.free] = rng.standard_normal(len(dd.space.free))
        f /= math.sqrt(f @ (dd.asm.M_full @ f))
        defect = gluing.resolvent_defect(dd, z, f)
        bint, _ = gluing.bint_norm_estimate(dd, z, n_probes=n_probes)
        proj = gluing.projector_difference(dd, lam0, radius, n_probes=n_probes,
                                           n_iter=12)
        rows.append((eps, bint, proj, defect))
    write_csv(out / "gluing.csv",
              ["epsilon", "bint_norm", "projector_diff_norm", "defect_residual"],
              rows)
    man.add_output(out / "gluing.csv")
    write_json(out / "gluing_manifest.json",
               {"lam0": lam0, "contour_radius": radius, "probe_seed": seed + 3})
    man.add_output(out / "gluing_manifest.json")
    print(f"gluing: defects {[f'{r[3]:.1e}' for r in rows]}")
    return EXIT_OK


def cmd_wave(cfg, out: Path, man: Manifest):
    h, nl, order, seed = _mesh_params(cfg)
    wcfg = cfg.get("wave", {})
    eps = float(wcfg.get("eps", 0.3))
    cavity, L = _resonator_pieces(cfg)
    lam0, gap = resonance.cavity_reference(cavity, h, order, seed)
    wl = 2 * math.pi / math.sqrt(lam0)

    from dataclasses import replace
    spec = build_resonator(cavity, L, eps)
    spec = replace(spec, truncation_radius=spec.envelope.radius + wl)
    pml = resonance.default_pml(spec, lam0)
    ops_res = resonance.truncated_operators(spec, pml, h, nl, order=1, seed=seed,
                                            h_exterior=wl / 8)
    st = resonance.find_resonance(ops_res, lam0, gap, eps=eps,
                                  check_robustness=False, seed=seed + 11)
    mesh = ops_res.mesh
    man.add_mesh("wave", mesh)
    chi = wave.spatial_cutoff(spec.envelope.center,
                              spec.envelope.radius + 0.25 * wl,
                              spec.truncation_radius - 0.1 * wl)
    wops = wave.build_wave_operators(mesh, chi, spec.envelope.center,
                                     pml.r0, pml.thickness,
                                     float(wcfg.get("sponge_strength", 6.0)))
    free = wops.asm.space.free
    u_res = st.field.coeffs[free]
    psi = wave.energy_window(lam0, 0.25 * gap, 0.45 * gap)
    f0 = wave.spectral_filter(wops, np.real(u_res) * wops.chi_nodes, psi)
    coeff, chi_u = wave.pi_projection(wops, u_res, st.alpha_eps, wops.chi_nodes, f0)
    rate_target = 2 * abs(np.imag(np.sqrt(st.rho)))
    T = float(wcfg.get("T", 0.12 / max(rate_target, 1e-12)))
    traj = wave.evolve(wops, f0, np.zeros_like(f0), T,
                       sample_every=int(wcfg.get("sample_every", 400)))
    fit = wave.decay_fit(traj, rate_target)
    pred = wave.projected_initial_energy(wops, coeff, chi_u, st.rho)
    write_csv(out / "wave.csv", ["t", "local_energy", "conserved_energy"],
              list(zip(traj.times, traj.local_energy, traj.conserved_energy)))
    man.add_output(out / "wave.csv")
    svg_plot(out / "wave.svg",
             [{"x": traj.times, "y": np.log(np.maximum(traj.local_energy, 1e-300)),
               "label": "ln E_loc", "style": "line", "markers": False}],
             title="local energy decay", xlabel="t", ylabel="ln E")
    man.add_output(out / "wave.svg")
    write_json(out / "wave_fit.json", {
        "rho": {"re": st.rho.real, "im": st.rho.imag},
        "rate_fitted": fit.rate, "rate_target": rate_target,
        "amplitude_fitted": fit.amplitude, "amplitude_projected": pred,
        "fit_window": fit.window, "T": T})
    man.add_output(out / "wave_fit.json")
    print(f"decay rate {fit.rate:.3e} vs target {rate_target:.3e} "
          f"(ratio {fit.rate / rate_target:.3f})")
    return EXIT_OK


def cmd_report(cfg, out: Path, man: Manifest):
    summary = {}
    missing = []
    for name, fname in (("sweep", "sweep_fit.json"), ("nodal", "nodal.json"),
                        ("wave", "wave_fit.json")):
        p = out / fname
        if p.exists():
            import json
            summary[name] = json.loads(p.read_text())
        else:
            missing.append(fname)
    if not summary:
        print("report: no upstream artifacts in the run directory",
              file=sys.stderr)
        return EXIT_MISSING
    summary["missing"] = missing
    write_json(out / "report.json", summary)
    man.add_output(out / "report.json")
    print(f"report: aggregated {sorted(summary.keys() - {'missing'})}, "
          f"missing {missing}")
    return EXIT_OK


COMMANDS = {
    "mesh": cmd_mesh,
    "eigs": cmd_eigs,
    "resonance": cmd_resonance,
    "sweep": cmd_sweep,
    "splitting": cmd_splitting,
    "nodal": cmd_nodal,
    "gluing": cmd_gluing,
    "wave": cmd_wave,
    "report": cmd_report,
}


def main(argv=None):
    parser = argparse.ArgumentParser(prog="resonate", description=__doc__)
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True)
    parser.add_argument("--set", action="append", default=[], metavar="K=V")
    parser.add_argument("--out", default="runs/latest")
    args = parser.parse_args(argv)

    try:
        cfg = load_config(args.config)
        cfg = apply_overrides(cfg, args.set)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    man = Manifest(out, args.command, cfg)
    try:
        code = COMMANDS[args.command](cfg, out, man)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except GUARD_ERRORS as exc:
        write_json(out / "error.json",
                   {"command": args.command, "error": type(exc).__name__,
                    "message": str(exc)})
        print(f"numerical guard: {exc}", file=sys.stderr)
        return EXIT_GUARD
    man.write()
    return code


if __name__ == "__main__":
    sys.exit(main())
