"""Command groups; each module registers its sub-commands on the shared parser."""
