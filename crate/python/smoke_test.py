"""Import the compiled extension and exercise the main entry points.

Build first with `cargo build -p magmech-python --release` (or use
`maturin develop` inside crates/python). The script looks for the shared
library under target/ when `pymagmech` is not importable.
"""

import importlib.util
import math
import pathlib
import shutil
import sys
import sysconfig
import tempfile

ROOT = pathlib.Path(__file__).resolve().parent.parent


def load():
    try:
        import pymagmech

        return pymagmech
    except ImportError:
        pass
    for profile in ("release", "debug"):
        lib = ROOT / "target" / profile / "libpymagmech.so"
        if lib.exists():
            break
    else:
        sys.exit("pymagmech not built: run `cargo build -p magmech-python`")
    tmp = pathlib.Path(tempfile.mkdtemp())
    target = tmp / ("pymagmech" + sysconfig.get_config_var("EXT_SUFFIX"))
    shutil.copy(lib, target)
    mod_spec = importlib.util.spec_from_file_location("pymagmech", target)
    module = importlib.util.module_from_spec(mod_spec)
    mod_spec.loader.exec_module(module)
    return module


def main():
    mm = load()

    n_th = mm.thermal_occupation(0.1, 274383.13)
    assert 7400 < n_th < 7800, n_th
    assert abs(mm.cooperativity(2.46e3, 2.8e6, 0.3) - 28.8) < 0.1
    assert abs(mm.min_phonon_bad_cavity(2.8e6, 274383.13) - 6.5) < 0.1

    cav, mech, temp = mm.load_config(str(ROOT / "fixtures" / "paper.cfg"))
    assert math.isclose(cav.kappa(), 2.8e6)
    d = mm.optimal_cooling_detuning(cav, mech)
    r = mm.backaction(cav, mech, d, 0.0, 2460.0, temp)
    assert r["n_final"] == n_th

    freqs, values = mm.simulate_s21(points=801)
    fit = mm.circle_fit(freqs, values)
    assert abs(fit["notch"]["q_loaded"] / 2913 - 1) < 1e-4, fit["notch"]

    trace = mm.simulate_spectrum(48.0, n_th, seed=7)
    assert len(trace) == 8001
    g0, err = mm.extract_g0(trace, n_th)
    assert abs(g0 - 48.0) < 3 * err, (g0, err)

    try:
        mm.fit_spectrum(mm.simulate_spectrum(48.0, n_th, peak_dbm=-150.0, n_averages=100, seed=3))
    except mm.FitError as e:
        assert "peak < 4 dB above floor" in str(e)
    else:
        raise AssertionError("pure-noise spectrum was fitted")

    ba = mm.fit_backaction(str(ROOT / "fixtures" / "backaction"), str(ROOT / "fixtures" / "paper.cfg"))
    assert abs(ba["fit"]["n_photons"] - 0.9) < 0.2
    assert abs(ba["fit"]["g0"] - 2460) < 80

    print(f"ok: n_th = {n_th:.1f}, g0 = {g0:.1f} +/- {err:.1f} Hz, backaction n = {ba['fit']['n_photons']:.3f}")


if __name__ == "__main__":
    main()
