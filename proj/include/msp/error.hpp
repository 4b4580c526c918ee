#pragma once

#include <stdexcept>
#include <string>

namespace msp {

// Violated precondition of an operation (empty input, bad argument, wrong phase).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Incompatible tensor shapes.
class DimensionError : public ContractError {
 public:
  using ContractError::ContractError;
};

// Token or class id outside its valid range.
class IndexError : public ContractError {
 public:
  using ContractError::ContractError;
};

// Malformed or inconsistent input files.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace msp
