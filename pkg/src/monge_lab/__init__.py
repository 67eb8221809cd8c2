"""Tools for computing optimal transport maps.

Submodules:

- ``autodiff``: numpy reverse-mode autodiff, MLPs, SGD/Adam.
- ``datasets``: synthetic 2-D measure pairs and Gaussian closed forms.
- ``discrete_ot``: exact assignment, Sinkhorn, regularized-dual solvers.
- ``w2gan``: adversarial training of transport maps against a dual critic.
- ``geodesic``: descent-as-geodesic diagnostics and deviation bounds.
- ``evaluation``: map quality reports, experiment runner, SVG figures.
- ``cli``: the ``monge-lab`` command line front end.
"""

__version__ = "0.1.0"
