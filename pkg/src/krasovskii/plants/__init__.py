"""Plant models: linear port-Hamiltonian systems and two DC microgrids."""

from .base import InfeasibleReference, InvariantViolation
from .boost import (BoostKrasovskiiOutput, BoostNetwork, boost_dynamics, boost_energy_balance,
                    boost_equilibrium, boost_pi_matrix, boost_sampled)
from .buck import (BuckNetwork, buck_dynamics, buck_energy_balance, buck_feedforward,
                   buck_pi_jacobian, buck_sampled)
from .lph import (LinearPHS, affine_fixed_point, build_Ac, build_As, consensus_closed_loop_map,
                  consensus_step_matrix, lph_dynamics, lph_equilibrium, lph_sampled, lph_step_map,
                  random_lph, stabilizer_closed_loop_map, consensus_invariant,
                  consensus_spectral_radius, consensus_equilibrium, lph_shifted_gradient, lph_instances)
