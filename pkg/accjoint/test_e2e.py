"""
End-to-End Test Script
Runs the complete workbench workflow on a small simulated study:
- Simulate a two-task data set from the desk generator
- Validate the generated model spec against the trials
- Fit the hierarchical model
- Summarize the stored chain and draw posterior predictive data

Usage:
    pytest test_e2e.py -s
    python test_e2e.py
"""

import json
import tempfile
from pathlib import Path

import pandas as pd
from click.testing import CliRunner

from workbench import cli

DESIGN = {
    "model": "desk",
    "subjects": 4,
    "trials_per_task": 80,
    "version": "matched",
    "seed": 31,
}

SAMPLER = {
    "particles_per_stage": {"burn_in": 10, "adaptation": 10, "sampling": 6},
    "draws_per_stage": {"burn_in": 10, "adaptation": 20, "sampling": 20},
    "seed": 31,
    "min_unique": 5,
    "start_mu": [0.2852, 1.1378, -1.6607, 0.4886, 1.1756, -1.7148],  # log of the desk group means
}


# Colors for output
class Colors:
    GREEN = '\033[92m'
    YELLOW = '\033[93m'
    RED = '\033[91m'
    BLUE = '\033[94m'
    BOLD = '\033[1m'
    END = '\033[0m'


def print_step(step_num, title):
    print(f"\n{Colors.BOLD}{Colors.BLUE}{'='*60}")
    print(f"STEP {step_num}: {title}")
    print(f"{'='*60}{Colors.END}")


def print_success(message):
    print(f"{Colors.GREEN}✓ {message}{Colors.END}")


def print_warning(message):
    print(f"{Colors.YELLOW}⚠ {message}{Colors.END}")


def print_error(message):
    print(f"{Colors.RED}✗ {message}{Colors.END}")


def print_info(message):
    print(f"  {message}")


class E2ETest:
    def __init__(self, workdir: Path):
        self.runner = CliRunner()
        self.workdir = workdir
        self.sim_dir = workdir / "sim"
        self.fit_dir = workdir / "fit"
        self.summary_dir = workdir / "summary"
        self.predict_dir = workdir / "predict"

    def _invoke(self, args):
        result = self.runner.invoke(cli, args)
        if result.exit_code != 0:
            print_error(f"exit {result.exit_code}: {' '.join(args[:1])}")
            print_info(result.output[-500:])
        return result

    def simulate(self):
        """Generate trials, true effects and the model document"""
        print_step(1, "Simulate Data")

        design_path = self.workdir / "design.json"
        design_path.write_text(json.dumps(DESIGN))
        result = self._invoke(["simulate", "--design", str(design_path), "--out", str(self.sim_dir)])
        if result.exit_code != 0:
            return False

        trials = pd.read_csv(self.sim_dir / "trials.csv")
        print_success("Data simulated")
        print_info(f"Trials: {len(trials)}")
        print_info(f"Subjects: {trials['subject'].nunique()}")
        return len(trials) == DESIGN["subjects"] * 2 * DESIGN["trials_per_task"]

    def validate(self):
        """Check the spec covers every generated cell"""
        print_step(2, "Validate Model Spec")

        result = self._invoke(["validate", "--data", str(self.sim_dir / "trials.csv"),
                               "--model", str(self.sim_dir / "model.json")])
        if result.exit_code != 0:
            return False
        print_success("Model spec covers the data")
        return True

    def fit(self):
        """Fit with a short sampler run"""
        print_step(3, "Fit Hierarchical Model")

        config_path = self.workdir / "fit.json"
        config_path.write_text(json.dumps({
            "data": "sim/trials.csv",
            "model": "sim/model.json",
            "out": "fit",
            "sampler": SAMPLER,
            "analysis": {"predictive_draws": 4},
        }))
        result = self._invoke(["fit", "--config", str(config_path)])
        if result.exit_code != 0:
            return False

        meta = json.loads((self.fit_dir / "meta.json").read_text())
        means = pd.read_csv(self.fit_dir / "group_means.csv")
        print_success("Chain stored")
        print_info(f"Parameters: {', '.join(meta['parameter_names'])}")
        for row in means.itertuples():
            print_info(f"{row.parameter}: {row.mean:.3f} (sd {row.sd:.3f})")
        return len(means) == 6 and (self.fit_dir / "heatmap.svg").exists()

    def summarize(self):
        """Rebuild the summary tables from the stored chain"""
        print_step(4, "Summarize Stored Chain")

        result = self._invoke(["summarize", "--chain", str(self.fit_dir / "chain.ndjson"),
                               "--out", str(self.summary_dir), "--blocks", "in", "out"])
        if result.exit_code != 0:
            return False

        correlations = pd.read_csv(self.summary_dir / "correlations.csv")
        between = correlations[correlations["between"]]
        print_success("Summary written")
        print_info(f"Between-task correlations: {len(between)}")
        n_reliable = int(between["reliable"].sum())
        print_info(f"Reliable: {n_reliable}")
        if n_reliable == 0:
            print_warning("No between-task correlation is reliable at this chain length")
        return len(between) == 9

    def predict(self):
        """Posterior predictive data sets from the stored chain"""
        print_step(5, "Posterior Predictive")

        result = self._invoke(["predict", "--chain", str(self.fit_dir / "chain.ndjson"), "--draws", "3",
                               "--out", str(self.predict_dir)])
        if result.exit_code != 0:
            return False

        predictive = pd.read_csv(self.predict_dir / "predictive.csv")
        accuracy = predictive.groupby("task")["correct"].mean()
        print_success("Predictive data written")
        for task, value in accuracy.items():
            print_info(f"{task} accuracy: {value:.3f}")
        return len(predictive) == 3 * DESIGN["subjects"] * 2 * DESIGN["trials_per_task"]


def run_all(workdir: Path):
    test = E2ETest(workdir)
    results = []
    for name, step in (("Simulate", test.simulate), ("Validate", test.validate), ("Fit", test.fit),
                       ("Summarize", test.summarize), ("Predict", test.predict)):
        results.append((name, step()))
        if not results[-1][1]:
            break
    return results


def test_full_workflow(tmp_path):
    results = run_all(tmp_path)
    assert [name for name, _ in results] == ["Simulate", "Validate", "Fit", "Summarize", "Predict"]
    assert all(ok for _, ok in results), results


def main():
    """Run the complete E2E test"""
    print(f"\n{Colors.BOLD}{'='*60}")
    print("END-TO-END TEST: Simulate, Fit, Summarize")
    print(f"{'='*60}{Colors.END}\n")

    with tempfile.TemporaryDirectory() as workdir:
        results = run_all(Path(workdir))

    print(f"\n{Colors.BOLD}{'='*60}")
    print("SUMMARY")
    print(f"{'='*60}{Colors.END}")
    for name, ok in results:
        if ok:
            print_success(name)
        else:
            print_error(name)


if __name__ == "__main__":
    main()
