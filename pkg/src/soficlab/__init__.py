"""soficlab: a desk-scale laboratory for measures on finite model spaces.

Group windows and sofic approximations, an exact measure algebra with a
method-of-types engine, covering numbers and AEP diagnostics, local
weak*/empirical convergence statistics, and the band-conditioning and
co-induction constructions, driven by a reproducible CLI.
"""

__version__ = "0.1.0"

from .groups import (BudgetExceededError, DefectReport, GroupKind,
                     GroupWindow, SoficApproximation, ball, cyclic_group,
                     cyclic_sofic, defect, direct_product, free_group,
                     identity_sofic, integer_lattice, product_sofic,
                     product_window, random_sofic)
from .measures import (Alphabet, CapabilityError, CellBandEvent,
                       ConditionedMeasure, CountVectorEvent, ExplicitEvent,
                       FibreProduct, MeasureExpr, MixtureMeasure, Partition,
                       ProductMeasure, RejectionBudgetError, SparseMeasure,
                       UniformOnCells, WindowDistribution, barycentre_check,
                       cell_mass, equipartition, iid_window_target,
                       mix_windows, tv_distance, window_marginal)
from .entropy import (AEPReport, CoveringReport, EntropyReport,
                      TypeClassTable, aep_check, build_type_classes,
                      cell_spectrum, covering_number, entropy_covering_gap,
                      hamming_ball_count, hamming_ball_growth_bound,
                      metric_cov_bounds, rate_estimate, shannon_entropy)
from .convergence import (ConvergenceReport, Neighbourhood, empirical_distribution,
                          good_model_set, lde_mass, le_mass, lw_fraction,
                          make_neighbourhood, pullback_name)
from .constructions import (ConditioningResult, EmptyBandError, SCENARIOS,
                            aep_condition, aep_transfer_check,
                            coinduct_measure, diagonal_select,
                            fibre_lw_check, majority_event)
