"""Learning with evolving class ontologies on synthetic hierarchical data."""
