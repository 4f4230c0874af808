#pragma once

#include <stdexcept>
#include <string>

namespace jscc {

/// Base of every exception thrown by the library. The category maps onto the
/// CLI exit code.
class Error : public std::runtime_error {
 public:
  enum class Category { config = 2, data = 3, numeric = 4 };

  Error(Category category, const std::string& what)
      : std::runtime_error(what), category_(category) {}

  Category category() const noexcept { return category_; }
  int exit_code() const noexcept { return static_cast<int>(category_); }

 private:
  Category category_;
};

/// Bad shapes, invalid hyperparameters, checkpoint/config disagreement.
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(Category::config, what) {}
};

/// Unreadable or malformed input files (datasets, checkpoints).
class DataError : public Error {
 public:
  explicit DataError(const std::string& what) : Error(Category::data, what) {}
};

/// Non-finite losses, activations or iterates.
class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what) : Error(Category::numeric, what) {}
};

}  // namespace jscc
