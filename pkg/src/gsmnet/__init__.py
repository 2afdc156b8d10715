"""gsmnet: physics-augmented neural constitutive models for small-strain
nonlinear viscoelasticity.

Two input-convex neural potentials (a free energy and a dissipation potential)
are embedded in the generalized-standard-material evolution framework, giving
constitutive models that satisfy the second law of thermodynamics by
construction.  The package ships the model, an implicit-Euler/Newton material
driver, an analytic reference material that doubles as a synthetic-data
oracle, four calibration methods, and a CLI.
"""

__version__ = "0.1.0"
