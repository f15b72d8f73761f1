"""
Regenerating Polling Systems Package

Simulation and stability classification of polling systems whose service
parameters are redrawn at every server visit. The package is organized as
follows:

- config.py: Run settings (environment variables and .env)
- models.py: Immutable domain types and the plan schema
- errors.py: Exception hierarchy
- main.py: Command line entry point
- services/: Matrices, stochastic and fluid models, Lyapunov estimates, pipelines
- utils/: Seeding, threads, output files and the plan loader
"""
