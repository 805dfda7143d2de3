"""Actor-critic treatment recommendation that mixes imitation of logged prescriptions with a value signal."""
