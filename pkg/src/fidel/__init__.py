"""First dense layer attack laboratory."""
