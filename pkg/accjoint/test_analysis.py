import numpy as np
import pytest

from analysis import (
    clamped_probit, correlation_summary, correlation_table, cov_to_corr, descriptive_cross_task, design_counts,
    group_mean_table, pearson_or_nan, posterior_predictive, precision_compare, predictive_summary,
    reliability_flags, subject_effect_points, summarize_sigma_draws,
)
from design_map import parse_model_spec
from errors import InvalidInputError
from hierarchy import GroupState
from lba import TrialRecord
from pmwg import ChainRecord, PosteriorChain, SamplerConfig, run_chain
from simstudy import SimDesign, build_generator, corr_to_cov, desk_generator, generate_dataset


def make_chain(sigmas, alphas=None, mus=None, names=("x", "y", "z"), blocks=("a", "a", "b"),
               subjects=("s1", "s2")):
    sigmas = np.asarray(sigmas, dtype=float)
    n, d = sigmas.shape[0], sigmas.shape[1]
    if alphas is None:
        alphas = np.zeros((n, len(subjects), d))
    if mus is None:
        mus = np.zeros((n, d))
    chain = PosteriorChain(parameter_names=list(names[:d]), subject_ids=list(subjects),
                           block_labels=list(blocks[:d]))
    for k in range(n):
        chain.append(ChainRecord(iteration=k + 1, stage="sampling", mu=mus[k], sigma=sigmas[k],
                                 a=np.ones(d), alpha=alphas[k]))
    return chain


# ==================== CORRELATIONS ====================

def test_cov_to_corr_example():
    corr = cov_to_corr(np.array([[4.0, 2.0], [2.0, 4.0]]))
    np.testing.assert_allclose(corr, [[1.0, 0.5], [0.5, 1.0]])


def test_cov_to_corr_rejects_nonpositive_diagonal():
    with pytest.raises(InvalidInputError):
        cov_to_corr(np.array([[0.0, 0.0], [0.0, 1.0]]))


def test_cov_to_corr_ignores_rescaling(rng):
    x = rng.standard_normal((10, 3))
    sigma = x.T @ x
    scale = np.diag([2.0, 0.25, 8.0])
    np.testing.assert_allclose(cov_to_corr(scale @ sigma @ scale), cov_to_corr(sigma), rtol=1e-15)


def test_identical_draws_have_zero_sd():
    sigma = np.array([[1.0, 0.3, 0.0], [0.3, 1.0, -0.2], [0.0, -0.2, 1.0]])
    summary = summarize_sigma_draws(np.stack([sigma] * 4), ["x", "y", "z"], ["a", "a", "b"])
    np.testing.assert_allclose(summary.mean, sigma)
    np.testing.assert_array_equal(summary.sd, np.zeros((3, 3)))
    # sd 0 everywhere, so 0 >= 3 * 0 flags even the exact zero at (0, 2)
    assert summary.reliable.all()


def test_reliability_rule():
    mean = np.array([[1.0, 0.3, -0.3], [0.3, 1.0, 0.0], [-0.3, 0.0, 1.0]])
    sd = np.array([[0.0, 0.05, 0.2], [0.05, 0.0, 0.0], [0.2, 0.0, 0.0]])
    flags = reliability_flags(mean, sd)
    assert flags[0, 1] and flags[1, 0]
    assert not flags[0, 2]
    assert flags[1, 2]
    assert flags.diagonal().all()


def test_reliability_flags_equal_the_rule(rng):
    mean = rng.uniform(-1.0, 1.0, (6, 6))
    sd = rng.uniform(0.0, 0.3, (6, 6))
    mean[0, 1], sd[0, 1] = 0.75, 0.25  # on the boundary, exact in binary
    np.testing.assert_array_equal(reliability_flags(mean, sd), np.abs(mean) >= 3.0 * sd)
    assert reliability_flags(mean, sd)[0, 1]


def test_summary_matches_recomputed_draws(rng):
    draws = []
    for _ in range(30):
        x = rng.standard_normal((12, 3))
        draws.append(x.T @ x)
    summary = summarize_sigma_draws(np.stack(draws), ["x", "y", "z"], ["a", "a", "b"])
    r01 = np.array([s[0, 1] / np.sqrt(s[0, 0] * s[1, 1]) for s in draws])
    assert summary.mean[0, 1] == pytest.approx(r01.mean(), abs=1e-12)
    assert summary.sd[0, 1] == pytest.approx(r01.std(), abs=1e-12)
    np.testing.assert_array_equal(summary.reliable, np.abs(summary.mean) >= 3 * summary.sd)


def test_single_draw_summary_warns(caplog):
    chain = make_chain([np.eye(3)])
    with caplog.at_level("WARNING"):
        summary = correlation_summary(chain)
    assert summary.n_draws == 1
    assert "1 draw" in caplog.text


def test_correlation_table_pairs():
    sigma = np.array([[1.0, 0.5, 0.2], [0.5, 1.0, 0.1], [0.2, 0.1, 1.0]])
    table = correlation_table(correlation_summary(make_chain([sigma, sigma])))
    assert len(table) == 3
    assert table["between"].tolist() == [False, True, True]
    assert table["mean"].tolist() == pytest.approx([0.5, 0.2, 0.1])


# ==================== POINT SUMMARIES ====================

def test_group_mean_table_at_zero():
    table = group_mean_table(make_chain([np.eye(3)] * 3))
    assert table["mean"].tolist() == [1.0, 1.0, 1.0]
    assert table["sd"].tolist() == [0.0, 0.0, 0.0]
    assert table["block"].tolist() == ["a", "a", "b"]


def test_group_mean_table_with_spec(tiny_chain, tiny_spec):
    table = group_mean_table(tiny_chain, tiny_spec)
    assert table["parameter"].tolist() == tiny_spec.vector_order
    np.testing.assert_allclose(table["mean"], np.exp(tiny_chain.mu_draws()).mean(axis=0))


def test_subject_effect_points(tiny_chain):
    points = subject_effect_points(tiny_chain)
    assert len(points) == 3 * 4
    first = points[(points["subject"] == "s02") & (points["parameter"] == "main.v_c")]
    expected = tiny_chain.alpha_draws()[:, 1, 1].mean()
    assert first["log_mean"].item() == pytest.approx(expected)


def test_single_draw_points_equal_the_draw():
    alphas = np.array([[[0.1, -0.2, 0.3], [1.0, 0.0, -1.0]]])
    points = subject_effect_points(make_chain([np.eye(3)], alphas=alphas))
    np.testing.assert_allclose(points["log_mean"], alphas[0].ravel())
    np.testing.assert_allclose(points["natural_mean"], np.exp(alphas[0].ravel()))


# ==================== PRECISION ====================

def test_precision_compare_identical_chains(rng):
    alphas = rng.standard_normal((20, 2, 3))
    joint = make_chain([np.eye(3)] * 20, alphas=alphas)
    first = make_chain([np.eye(2)] * 20, alphas=alphas[:, :, :2], names=("x", "y"), blocks=("a", "a"))
    second = make_chain([np.eye(1)] * 20, alphas=alphas[:, ::-1, 2:], names=("z",), blocks=("b",),
                        subjects=("s2", "s1"))
    result = precision_compare(joint, [first, second])
    assert len(result.points) == 6
    np.testing.assert_allclose(result.points["pct_change"], 0.0, atol=1e-12)
    assert result.medians["block"].tolist() == ["a", "b"]
    assert result.medians["share_below_identity"].tolist() == [0.0, 0.0]
    assert result.medians["n"].tolist() == [4, 2]


def test_precision_compare_mismatch():
    joint = make_chain([np.eye(3)])
    wrong_subjects = make_chain([np.eye(3)], subjects=("s1", "s9"))
    with pytest.raises(InvalidInputError):
        precision_compare(joint, [wrong_subjects])
    partial = make_chain([np.eye(2)], names=("x", "y"))
    with pytest.raises(InvalidInputError):
        precision_compare(joint, [partial])


# ==================== PREDICTIVE ====================

def test_design_counts(tiny_trials):
    counts = design_counts(tiny_trials)
    assert sum(counts.values()) == 90
    assert {k[0] for k in counts} == {"s01", "s02", "s03"}


def test_predictive_with_no_draws_is_empty(tiny_chain, tiny_spec, tiny_trials, rng):
    frame = posterior_predictive(tiny_chain, tiny_spec, design_counts(tiny_trials), 0, rng)
    assert frame.empty
    assert list(frame.columns) == ["draw", "subject", "task", "cell", "response", "rt", "correct"]


def test_predictive_reproduces_design(tiny_chain, tiny_spec, tiny_trials, rng):
    frame = posterior_predictive(tiny_chain, tiny_spec, design_counts(tiny_trials), 3, rng)
    assert len(frame) == 3 * 90
    assert sorted(frame["draw"].unique()) == [0, 1, 2]
    per_draw = frame[frame["draw"] == 1].groupby(["subject", "task", "cell"]).size().to_dict()
    assert per_draw == design_counts(tiny_trials)
    assert set(frame["correct"].unique()) <= {0.0, 1.0}
    assert (frame["rt"] > 0).all()


def test_predictive_rejects_unknown_subject(tiny_chain, tiny_spec, rng):
    with pytest.raises(InvalidInputError):
        posterior_predictive(tiny_chain, tiny_spec, {("s99", "main", "left"): 2}, 1, rng)


def test_predictive_summary_columns(tiny_chain, tiny_spec, tiny_trials, rng):
    frame = posterior_predictive(tiny_chain, tiny_spec, design_counts(tiny_trials), 20, rng)
    table = predictive_summary(frame, tiny_trials, tiny_spec)
    assert table[["task", "cell"]].values.tolist() == [["main", "left"], ["main", "right"]]
    assert (table["accuracy_lo"] <= table["accuracy_hi"]).all()
    assert table["median_rt_covered"].dtype == bool


# ==================== DESCRIPTIVES ====================

def _descriptive_data():
    # (out rts, out correct count of 4, in rts, in correct count of 4) per subject
    layout = {
        "s1": ([0.5, 0.6, 0.7, 0.6], 4, [0.7, 0.8, 0.9, 0.8], 3),
        "s2": ([0.4, 0.5, 0.5, 0.6], 3, [0.6, 0.6, 0.7, 0.7], 3),
        "s3": ([0.8, 0.9, 0.7, 0.8], 2, [0.9, 1.0, 1.1, 1.0], 1),
        "s4": ([0.6, 0.6, 0.6, 0.6], 1, [0.8, 0.7, 0.7, 0.8], 2),
        "s5": ([0.9, 1.0, 1.0, 1.1], 0, [1.2, 1.1, 1.0, 1.3], 4),
    }
    data = []
    for subject, (out_rts, out_ok, in_rts, in_ok) in layout.items():
        for task, rts, ok in (("out", out_rts, out_ok), ("in", in_rts, in_ok)):
            for k, rt in enumerate(rts):
                data.append(TrialRecord(subject, task, "collapsed", 0 if k < ok else 1, rt))
    return layout, data


def test_descriptive_cross_task_matches_numpy(desk_spec):
    layout, data = _descriptive_data()
    summary = descriptive_cross_task(data, desk_spec)
    assert len(summary.per_subject) == 10

    out_rt = [np.mean(v[0]) for v in layout.values()]
    in_rt = [np.mean(v[2]) for v in layout.values()]
    rt_row = summary.correlations[summary.correlations["measure"] == "mean_rt"].iloc[0]
    assert rt_row["r"] == pytest.approx(np.corrcoef(out_rt, in_rt)[0, 1])
    assert rt_row["n_subjects"] == 5

    out_p = clamped_probit([v[1] / 4 for v in layout.values()], 4)
    in_p = clamped_probit([v[3] / 4 for v in layout.values()], 4)
    probit_row = summary.correlations[summary.correlations["measure"] == "probit"].iloc[0]
    assert probit_row["r"] == pytest.approx(np.corrcoef(out_p, in_p)[0, 1])


def test_clamped_probit_bounds():
    assert clamped_probit(1.0, 100) == pytest.approx(2.5758293, abs=1e-6)
    assert clamped_probit(0.0, 100) == pytest.approx(-2.5758293, abs=1e-6)
    assert clamped_probit(0.5, 10) == 0.0


def test_pearson_edge_cases():
    assert pearson_or_nan([1.0, 2.0, 3.0], [2.0, 4.0, 6.0]) == pytest.approx(1.0)
    assert np.isnan(pearson_or_nan([1.0, 2.0], [1.0, 2.0]))
    assert np.isnan(pearson_or_nan([1.0, 1.0, 1.0], [1.0, 2.0, 3.0]))


def test_identical_task_columns_correlate_perfectly(desk_spec):
    data = []
    for s, rt in enumerate([0.5, 0.7, 0.6, 0.9]):
        for task in ("out", "in"):
            data.append(TrialRecord(f"s{s}", task, "collapsed", 0, rt))
            data.append(TrialRecord(f"s{s}", task, "collapsed", 1, rt + 0.1))
    summary = descriptive_cross_task(data, desk_spec)
    rt_row = summary.correlations[summary.correlations["measure"] == "mean_rt"].iloc[0]
    assert rt_row["r"] == pytest.approx(1.0)
    probit_row = summary.correlations[summary.correlations["measure"] == "probit"].iloc[0]
    assert not probit_row["defined"]


def test_correlated_thresholds_give_positive_rt_correlation(desk_spec):
    # thresholds vary widely and correlate across tasks; drifts and non-decision times barely vary
    corr = np.eye(6)
    corr[0, 3] = corr[3, 0] = 0.9
    sd = np.array([0.3, 0.02, 0.02, 0.3, 0.02, 0.02])
    gen = GroupState(mu=desk_generator(desk_spec).mu, sigma=corr_to_cov(corr, sd), a=np.ones(6))
    data, _ = generate_dataset(SimDesign(subjects=40, trials_per_task=250, seed=12), desk_spec, generator=gen)
    summary = descriptive_cross_task(data, desk_spec)
    rt_row = summary.correlations[summary.correlations["measure"] == "mean_rt"].iloc[0]
    assert rt_row["n_subjects"] == 40
    assert rt_row["r"] > 0


def _single_task_spec(spec, task):
    document = spec.model_dump()
    document["tasks"] = [t for t in document["tasks"] if t["name"] == task]
    document["vector_order"] = [n for n in document["vector_order"] if n.startswith(f"{task}.")]
    document["fixed"] = {n: v for n, v in document["fixed"].items() if n.startswith(f"{task}.")}
    return parse_model_spec(document)


@pytest.mark.slow
def test_joint_fit_sharpens_the_short_task(desk_spec):
    gen = build_generator("uniform_r", desk_generator(desk_spec), target_r=0.8)
    plan = {("out", "collapsed"): 150, ("in", "collapsed"): 600}
    data, _ = generate_dataset(SimDesign(subjects=30, seed=21), desk_spec, plan=plan, generator=gen)

    def fit(spec, trials):
        start = [gen.mu[desk_spec.vector_order.index(name)] for name in spec.vector_order]
        cfg = SamplerConfig(
            particles_per_stage={"burn_in": 50, "adaptation": 50, "sampling": 30},
            draws_per_stage={"burn_in": 200, "adaptation": 200, "sampling": 400},
            seed=21, start_mu=start,
        )
        return run_chain(trials, spec, cfg)

    joint = fit(desk_spec, data)
    independent = [fit(_single_task_spec(desk_spec, task), [t for t in data if t.task == task])
                   for task in ("out", "in")]
    medians = precision_compare(joint, independent).medians.set_index("block")["median_pct_change"]
    assert medians["out"] < 0
    assert medians["out"] < medians["in"]
