# data module
