"""Coalescent statistics under multiple- and simultaneous-merger genealogies.

The package splits along the pipeline: `measures` defines the driving
measures and their merger rates, `recursions` computes exact expectations
(Green functions, family-size tables, expected spectra), `simulator` draws
genealogies and spectra, `inference` runs the calibrated likelihood-ratio
machinery, and `xiarg` covers the multi-locus simultaneous-merger model with
its simulation-based likelihood. `coalstat.cli` exposes all of it as the
`coalstat` command.
"""

from .errors import (
    ArgumentError,
    CoalstatError,
    DegenerateDataError,
    DomainError,
    InvariantError,
    SpecError,
    UnsupportedModelError,
)
from .measures import (
    BOLTHAUSEN_SZNITMAN,
    KINGMAN,
    STAR,
    CoalescentModel,
    LambdaFamily,
    beta_coalescent,
    growth_model,
    lambda_model,
    lambda_rate,
    merger_weight_row,
    moment_integral,
    parse_family,
    parse_model,
    point_mass,
    total_merge_rate,
    two_atom,
    xi_fourfold_rate,
    xi_model,
)
from .recursions import (
    JumpRates,
    LevelTimes,
    PTable,
    RecursionTables,
    bc_jump_rates,
    build_tables,
    expected_branch_lengths,
    expected_level_times_growth,
    expected_sfs,
    expected_total_length,
    fold,
    green_function,
    kingman_p_closed_form,
    p_table,
    phi,
)
from .simulator import (
    BatchResult,
    FamilySizeLengths,
    SfsVector,
    default_workers,
    drop_mutations_fixed_s,
    drop_mutations_poisson,
    fresh_seed,
    iter_sfs_chunks,
    replicate_rng,
    simulate_lengths,
    simulate_sfs_batch,
)
from .inference import (
    HypothesisGrid,
    LrResult,
    PowerEstimate,
    TestCalibration,
    TestDecision,
    calibrate,
    evaluate_test,
    fixed_s_loglik,
    lr_statistic,
    pair_coalescence_probability,
    parse_grid,
    poisson_approx_loglik,
    power,
    real_time_unit,
    watterson,
)
from .xiarg import (
    AncestralConfig,
    KdeModel,
    MultiLocusSummary,
    MultilocusLikelihood,
    MultilocusLrResult,
    groupmerge,
    initial_config,
    kde_eval,
    kde_fit,
    kde_logpdf,
    multilocus_lr,
    multilocus_statistic,
    pairmerge,
    recomb,
    simulate_arg,
    simulate_multilocus_point,
    simulate_summary_points,
    summarize,
    validate_config,
    xi_block_counting_rates,
    xi_expected_total_length,
    xi_green_function,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
