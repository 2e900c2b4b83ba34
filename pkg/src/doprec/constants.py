"""Physical constants (CODATA 2018 exact values) in the unit system used
throughout the package: lengths in cm unless stated otherwise, energies in eV,
potentials in V, densities in cm^-3.
"""

Q = 1.602176634e-19        # elementary charge [C]
K_B = 1.380649e-23         # Boltzmann constant [J/K]
K_B_EV = K_B / Q           # Boltzmann constant [eV/K]
H_PLANCK = 6.62607015e-34  # Planck constant [J s]
EPS0 = 8.8541878128e-14    # vacuum permittivity [F/cm]
