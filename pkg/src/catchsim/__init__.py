"""catchsim: simulation and learning toolkit for robotic catching of
flying objects.

Subsystems: damped ballistic flight simulation, LSTM trajectory prediction,
catching-pose quality scoring, PPO-trained reaching/grasping/gating control
policies, and an evaluation harness with noise and perturbation injection.
"""

__version__ = "0.1.0"
