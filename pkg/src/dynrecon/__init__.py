"""Learning, forecasting and stability analysis of reconstructed dynamical systems."""
from .dynsys import (DivergenceError, ObservationMap, SystemSpec, TrajectoryBundle,
                     attractor_diameter, generate_trajectory, jacobian, sample_mu, step_system)
from .embed import (DelayParams, EmbeddedOrbit, ReservoirParams, delay_embed, delay_g,
                    delay_jacobians, drive, injectivity_diagnostic, reservoir_g, reservoir_init,
                    reservoir_jacobians)
from .learn import (FeatureMap, FeedbackModel, RankDeficientError, build_feature_map,
                    fit_direct_models, fit_feedback, fit_horizon_models, holdout_indices,
                    project_empirical, projection_error, training_pairs)
from .forecast import (AutocorrCurve, BlendedFeedback, ErrorCurve, ExactDelayFeedback,
                       ReconstructedSystem, autocorrelation, decorrelation_time, direct_bound,
                       error_direct, error_iterative, guard_ball, iterate_reconstruction,
                       mixed_spectrum_diagnostic)
from .cocycle import (CocycleGenerator, LyapunovSpectrum, c_phi_Phi, cocycle_product,
                      constant_generator, exponent_subset_check, graph_transform, growth_rate,
                      lyapunov_spectrum, perturbed_iterate, reconstructed_generator,
                      tangent_generator)

__version__ = "0.1.0"
