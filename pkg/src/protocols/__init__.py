# Round protocols: parallel split learning, split federated learning, collaborative relay
