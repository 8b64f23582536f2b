# Scenario runner and bundled scenarios
