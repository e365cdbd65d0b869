/*
    Licensed under the Apache License, Version 2.0 (the "License");
    you may not use this file except in compliance with the License.
    You may obtain a copy of the License at

        https://www.apache.org/licenses/LICENSE-2.0

    Unless required by applicable law or agreed to in writing, software
    distributed under the License is distributed on an "AS IS" BASIS,
    WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
    See the License for the specific language governing permissions and
    limitations under the License.
*/

#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace flow {

/// Raised while a job is being described or compiled into a plan.
class BuildError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised by a running job: user-code exceptions, transport failures, startup errors.
class JobError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A user function failed inside operator `op_id`.
class OperatorError : public JobError {
 public:
  OperatorError(std::size_t op_id, const std::string& what)
      : JobError("operator " + std::to_string(op_id) + ": " + what), op_id_(op_id) {}

  std::size_t op_id() const noexcept { return op_id_; }

 private:
  std::size_t op_id_;
};

/// A broken engine invariant. Never expected in a correct run.
class InvariantError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class DecodeError : public std::runtime_error {
 public:
  DecodeError(std::size_t offset, const std::string& what)
      : std::runtime_error("decode error at byte " + std::to_string(offset) + ": " + what),
        offset_(offset) {}

  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

class NetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Thrown inside task threads once the job has been aborted elsewhere.
class JobAborted : public std::runtime_error {
 public:
  JobAborted() : std::runtime_error("job aborted") {}
};

}  // namespace flow
