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
#include <functional>
#include <tuple>
#include <type_traits>
#include <utility>

namespace flow {

template <class... Fs>
struct Overloaded : Fs... {
  using Fs::operator()...;
};
template <class... Fs>
Overloaded(Fs...) -> Overloaded<Fs...>;

template <class... Ts>
struct TypeList {
  static constexpr std::size_t size = sizeof...(Ts);
};

template <std::size_t I, class List>
struct TypeAt;
template <std::size_t I, class... Ts>
struct TypeAt<I, TypeList<Ts...>> {
  using type = std::tuple_element_t<I, std::tuple<Ts...>>;
};
template <std::size_t I, class List>
using TypeAtT = typename TypeAt<I, List>::type;

/// Calls `fn.template operator()<I>()` for the runtime index `index` < N.
template <std::size_t N, class F>
decltype(auto) with_index(std::size_t index, F&& fn) {
  static_assert(N > 0);
  return [&]<std::size_t... Is>(std::index_sequence<Is...>) -> decltype(auto) {
    using R = decltype(fn.template operator()<0>());
    if constexpr (std::is_void_v<R>) {
      ((index == Is ? (fn.template operator()<Is>(), true) : false) || ...);
    } else {
      R out{};
      ((index == Is ? (out = fn.template operator()<Is>(), true) : false) || ...);
      return out;
    }
  }(std::make_index_sequence<N>{});
}

template <class T>
struct IsPair : std::false_type {};
template <class A, class B>
struct IsPair<std::pair<A, B>> : std::true_type {};
template <class T>
inline constexpr bool is_pair_v = IsPair<std::remove_cvref_t<T>>::value;

namespace detail {

template <class F>
struct CallableTraits : CallableTraits<decltype(&F::operator())> {};
template <class C, class R, class... A>
struct CallableTraits<R (C::*)(A...) const> {
  using args = TypeList<A...>;
};
template <class C, class R, class... A>
struct CallableTraits<R (C::*)(A...)> {
  using args = TypeList<A...>;
};
template <class R, class... A>
struct CallableTraits<R (*)(A...)> {
  using args = TypeList<A...>;
};

}  // namespace detail

/// Decayed type of the I-th parameter of a non-generic callable.
template <class F, std::size_t I>
using ArgT = std::remove_cvref_t<TypeAtT<I, typename detail::CallableTraits<std::decay_t<F>>::args>>;

}  // namespace flow
