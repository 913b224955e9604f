# Online derivative-kernel graph topology inference and its convergence model.
