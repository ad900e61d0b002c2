#pragma once

/** @file evaluate.hpp
    @brief Comparison of a trained state with exact diagonalization.
*/

#include <algorithm>
#include <cmath>

#include "ed.hpp"
#include "vmc.hpp"

namespace dyson {

struct ExactComparison {
    double energy = 0.0;       // <Psi|H|Psi> from the enumerated amplitude table
    double energy_ed = 0.0;
    double rel_error = 0.0;    // |E - E0| / |E0|
    double infidelity = 0.0;   // 1 - overlap with the ground-state degeneracy group
    int degeneracy = 1;
};

/// Number of ED states requested so that a twofold ground space is always resolved.
inline constexpr int kEdStates = 3;

inline ExactComparison compare_with_ed(const TrainConfig& tc, const Model& m, const GroundStateResult& gs) {
    const int n = tc.hamiltonian.n;
    if (n > kMaxEnumerationSites) throw ResourceError("compare_with_ed: n too large to enumerate");
    PreparedModel pm(m, n);
    const auto psi = amplitude_table(pm, tc.hamiltonian.conserves_sz(), tc.uses_marshall());
    ExactComparison c;
    c.energy = table_energy(tc.hamiltonian, psi);
    c.energy_ed = gs.energies[0];
    c.rel_error = std::abs(c.energy - c.energy_ed) / std::abs(c.energy_ed);
    c.infidelity = std::max(0.0, 1.0 - fidelity_subspace(psi, gs));
    c.degeneracy = static_cast<int>(gs.ground_group().size());
    return c;
}

inline ExactComparison compare_with_ed(const TrainConfig& tc, const Model& m) {
    return compare_with_ed(tc, m, ground_states(tc.hamiltonian, kEdStates));
}

} // namespace dyson
